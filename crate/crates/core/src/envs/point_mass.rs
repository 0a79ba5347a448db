use rand::Rng;

pub const OBS_DIM: usize = 16;
pub const GRAVITY: f64 = 2.2;
pub const GOAL: f64 = 0.5;
const DT: f64 = 0.05;
const MAX_ACCEL: f64 = 4.0;
const DAMPING: f64 = 2.8;
const BUMP_WIDTH: f64 = 0.15;
const KP: f64 = 8.0;
const KD: f64 = 2.0;

/// A mass on a rail in `[-1, 1]` with walls at both ends, tied to the left
/// wall by a damped spring and pushed by the action. A constant action `a`
/// holds the mass at `4a / k - 1` for spring stiffness `k`. Reward peaks at
/// the goal.
#[derive(Clone, Debug, Default)]
pub struct PointMass {
    pub x: f64,
    pub v: f64,
}

impl PointMass {
    pub(super) fn reset<R: Rng>(&mut self, rng: &mut R) {
        self.x = rng.random_range(-1.0..-0.6);
        self.v = 0.0;
    }

    /// Advances one substep and returns its dense reward.
    pub(super) fn substep(&mut self, a: f64, gravity: f64) -> f64 {
        self.v += DT * (MAX_ACCEL * a - gravity * (self.x + 1.0) - DAMPING * self.v);
        self.x += DT * self.v;
        if self.x.abs() > 1.0 {
            self.x = self.x.signum();
            self.v = 0.0;
        }
        reward(self.x)
    }

    /// Gaussian bump at the mass position over 16 evenly spaced pixels.
    pub(super) fn render(&self) -> Vec<f64> {
        (0..OBS_DIM)
            .map(|i| {
                let c = -1.0 + 2.0 * i as f64 / (OBS_DIM - 1) as f64;
                (-(self.x - c).powi(2) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
            })
            .collect()
    }

    /// PD control toward the goal with spring feed-forward, all scaled by
    /// `gain`.
    pub(super) fn expert(&self, gain: f64, gravity: f64) -> f64 {
        gain * (KP * (GOAL - self.x) - KD * self.v + gravity * (self.x + 1.0) / MAX_ACCEL)
    }
}

pub fn reward(x: f64) -> f64 {
    (1.0 - (x - GOAL).abs()).max(0.0)
}
