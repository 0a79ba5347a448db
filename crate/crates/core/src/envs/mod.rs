//! Small partially observed control tasks rendered to pixel vectors.
//!
//! Both tasks hide their physical state behind a rendering, emit per-step
//! rewards in `[0, 1]`, repeat each action for a fixed number of simulator
//! substeps, and run for a fixed number of steps.

mod episode;
mod expert;
mod pendulum;
mod point_mass;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episode::{
    read_episodes, run_episode, write_episodes, Episode, EpisodeFile, EpisodeHeader,
    EPISODE_VERSION,
};
pub use expert::{
    calibrate_gain, expert_return, gen_expert_dataset, ExpertQuality, EXPERT_ACTION_NOISE,
    PENDULUM_SUBOPTIMAL_GAIN, POINT_MASS_SUBOPTIMAL_GAIN,
};
pub use pendulum::Pendulum;
pub use point_mass::PointMass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointMass,
    Pendulum,
}

impl EnvName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point_mass" => Ok(EnvName::PointMass),
            "pendulum" => Ok(EnvName::Pendulum),
            _ => Err(Error::Config(format!("unknown environment {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Dense,
    /// Rewards below [`SPARSE_THRESHOLD`] are zeroed.
    Sparse,
}

pub const SPARSE_THRESHOLD: f64 = 0.5;

/// Zeroes rewards below the sparse threshold; others pass unchanged.
pub fn sparse_filter(r: f64) -> f64 {
    if r < SPARSE_THRESHOLD {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvName,
    /// Flattened pixel count; fixed by `name`.
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episode_length: usize,
    pub action_repeat: usize,
    pub reward_mode: RewardMode,
    /// Std of Gaussian noise added to every pixel.
    pub obs_noise_std: f64,
    /// Restoring pull: spring stiffness toward the left wall for the point
    /// mass, gravitational acceleration for the pendulum.
    pub gravity: f64,
}

impl EnvSpec {
    pub fn point_mass() -> Self {
        Self {
            name: EnvName::PointMass,
            obs_dim: point_mass::OBS_DIM,
            action_dim: 1,
            episode_length: 100,
            action_repeat: 2,
            reward_mode: RewardMode::Dense,
            obs_noise_std: 0.0,
            gravity: point_mass::GRAVITY,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            name: EnvName::Pendulum,
            obs_dim: pendulum::OBS_DIM,
            action_dim: 1,
            episode_length: 100,
            action_repeat: 2,
            reward_mode: RewardMode::Dense,
            obs_noise_std: 0.0,
            gravity: pendulum::GRAVITY,
        }
    }

    pub fn for_name(name: EnvName) -> Self {
        match name {
            EnvName::PointMass => Self::point_mass(),
            EnvName::Pendulum => Self::pendulum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = Self::for_name(self.name);
        if self.obs_dim != want.obs_dim || self.action_dim != want.action_dim {
            return Err(Error::Config(format!(
                "env.obs_dim/action_dim are fixed at {}/{} for {:?}",
                want.obs_dim, want.action_dim, self.name
            )));
        }
        if self.episode_length == 0 || self.action_repeat == 0 {
            return Err(Error::Config(
                "env.episode_length and env.action_repeat must be at least 1".into(),
            ));
        }
        if !(self.obs_noise_std >= 0.0 && self.obs_noise_std.is_finite()) {
            return Err(Error::Config(
                "env.obs_noise_std must be finite and nonnegative".into(),
            ));
        }
        if !self.gravity.is_finite() {
            return Err(Error::Config("env.gravity must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// The action actually applied, after clipping.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug)]
enum Physics {
    PointMass(PointMass),
    Pendulum(Pendulum),
}

/// One environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    physics: Physics,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    t: usize,
    started: bool,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let physics = match spec.name {
            EnvName::PointMass => Physics::PointMass(PointMass::default()),
            EnvName::Pendulum => Physics::Pendulum(Pendulum::default()),
        };
        Ok(Self {
            obs: vec![0.0; spec.obs_dim],
            spec,
            physics,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            started: false,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Steps taken since the last reset.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.started && self.t >= self.spec.episode_length
    }

    /// Draws a random initial state from `seed` and returns its rendering.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        match &mut self.physics {
            Physics::PointMass(p) => p.reset(&mut self.rng),
            Physics::Pendulum(p) => p.reset(&mut self.rng),
        }
        self.t = 0;
        self.started = true;
        self.obs = self.render();
        self.obs.clone()
    }

    /// Places the system in an exact physical state, keeping the step count.
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != 2 || state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "set_state",
                detail: format!("expected two finite values, got {state:?}"),
            });
        }
        match &mut self.physics {
            Physics::PointMass(p) => {
                p.x = state[0];
                p.v = state[1];
            }
            Physics::Pendulum(p) => {
                p.angle = state[0];
                p.velocity = state[1];
            }
        }
        self.obs = self.render();
        Ok(())
    }

    /// Privileged physical state: position and velocity, or angle and
    /// angular velocity.
    pub fn state(&self) -> [f64; 2] {
        match &self.physics {
            Physics::PointMass(p) => [p.x, p.v],
            Physics::Pendulum(p) => [p.angle, p.velocity],
        }
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    /// Applies `action`, clipped to `[-1, 1]`, for `action_repeat` substeps.
    /// The reward is the substep mean, then filtered in sparse mode.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.started {
            return Err(Error::Contract("step before reset".into()));
        }
        if self.done() {
            return Err(Error::Contract("step after the episode finished".into()));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::dim(
                "env_step",
                format!(
                    "action has {} entries, expected {}",
                    action.len(),
                    self.spec.action_dim
                ),
            ));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric { op: "env_step" });
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let mut total = 0.0;
        for _ in 0..self.spec.action_repeat {
            total += match &mut self.physics {
                Physics::PointMass(p) => p.substep(a[0], self.spec.gravity),
                Physics::Pendulum(p) => p.substep(a[0], self.spec.gravity),
            };
        }
        let mut reward = total / self.spec.action_repeat as f64;
        if self.spec.reward_mode == RewardMode::Sparse {
            reward = sparse_filter(reward);
        }
        let obs = std::mem::take(&mut self.obs);
        self.obs = self.render();
        self.t += 1;
        Ok(Transition {
            obs,
            action: a,
            reward,
            next_obs: self.obs.clone(),
            done: self.done(),
        })
    }

    fn render(&mut self) -> Vec<f64> {
        let mut out = match &self.physics {
            Physics::PointMass(p) => p.render(),
            Physics::Pendulum(p) => p.render(),
        };
        if self.spec.obs_noise_std > 0.0 {
            let n = Normal::new(0.0, self.spec.obs_noise_std).expect("validated std");
            for v in &mut out {
                *v = (*v + n.sample(&mut self.rng)).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Scripted expert action for the current physical state.
    pub fn expert_action(&self, quality: ExpertQuality) -> Vec<f64> {
        self.expert_action_with_gain(quality.gain(self.spec.name))
    }

    /// The expert controller with every gain multiplied by `gain`.
    pub fn expert_action_with_gain(&self, gain: f64) -> Vec<f64> {
        let a = match &self.physics {
            Physics::PointMass(p) => p.expert(gain, self.spec.gravity),
            Physics::Pendulum(p) => p.expert(gain, self.spec.gravity),
        };
        vec![a.clamp(-1.0, 1.0)]
    }
}
