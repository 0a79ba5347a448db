use std::f64::consts::PI;

use rand::Rng;

pub const SIDE: usize = 16;
pub const OBS_DIM: usize = SIDE * SIDE;
pub const GRAVITY: f64 = 10.0;
const DT: f64 = 0.05;
const MAX_TORQUE: f64 = 3.0;
const DAMPING: f64 = 0.3;
const MAX_SPEED: f64 = 8.0;
const ROD_WIDTH: f64 = 0.12;
const KP: f64 = 6.0;
const KD: f64 = 1.5;
const KE: f64 = 1.0;
/// Balance near the top once `cos(angle)` exceeds this; pump energy below.
const CATCH: f64 = 0.8;

/// A torque-limited pendulum; `angle = 0` is upright. The torque alone
/// cannot lift the rod, so reaching the top requires swinging.
#[derive(Clone, Debug, Default)]
pub struct Pendulum {
    pub angle: f64,
    pub velocity: f64,
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub(super) fn reset<R: Rng>(&mut self, rng: &mut R) {
        self.angle = rng.random_range(-PI..PI);
        self.velocity = rng.random_range(-1.0..1.0);
    }

    pub(super) fn substep(&mut self, a: f64, gravity: f64) -> f64 {
        let acc = gravity * self.angle.sin() + MAX_TORQUE * a - DAMPING * self.velocity;
        self.velocity = (self.velocity + DT * acc).clamp(-MAX_SPEED, MAX_SPEED);
        self.angle = wrap(self.angle + DT * self.velocity);
        (self.angle.cos() + 1.0) / 2.0
    }

    /// 16x16 grayscale image of the rod from the pivot at the center.
    pub(super) fn render(&self) -> Vec<f64> {
        let (tip_x, tip_y) = (self.angle.sin() * 0.8, self.angle.cos() * 0.8);
        let mut out = Vec::with_capacity(OBS_DIM);
        for row in 0..SIDE {
            for col in 0..SIDE {
                let px = -1.0 + (2 * col + 1) as f64 / SIDE as f64;
                let py = 1.0 - (2 * row + 1) as f64 / SIDE as f64;
                let s = ((px * tip_x + py * tip_y) / 0.64).clamp(0.0, 1.0);
                let d2 = (px - s * tip_x).powi(2) + (py - s * tip_y).powi(2);
                out.push((-d2 / (2.0 * ROD_WIDTH * ROD_WIDTH)).exp());
            }
        }
        out
    }

    /// Energy pumping away from the top, PD balancing near it; every gain
    /// scaled by `gain`.
    pub(super) fn expert(&self, gain: f64, gravity: f64) -> f64 {
        let raw = if self.angle.cos() > CATCH {
            -(KP * self.angle + KD * self.velocity)
        } else {
            let energy = 0.5 * self.velocity * self.velocity + gravity * (self.angle.cos() - 1.0);
            KE * (-energy) * self.velocity
        };
        gain * raw
    }
}
