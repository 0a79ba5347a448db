use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freeenergy::LossConfig;
use crate::rssm::ActionDraw;

/// Which objectives an agent minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Imitation and reinforcement objectives together.
    ImitationRl,
    /// Imitation only for `pretrain_iters` iterations, then reinforcement only.
    PretrainedRl,
    RlOnly,
    ImitationOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::ImitationRl,
        Mode::PretrainedRl,
        Mode::RlOnly,
        Mode::ImitationOnly,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "imitation_rl" => Ok(Mode::ImitationRl),
            "pretrained_rl" => Ok(Mode::PretrainedRl),
            "rl_only" => Ok(Mode::RlOnly),
            "imitation_only" => Ok(Mode::ImitationOnly),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ImitationRl => "imitation_rl",
            Mode::PretrainedRl => "pretrained_rl",
            Mode::RlOnly => "rl_only",
            Mode::ImitationOnly => "imitation_only",
        }
    }

    pub fn uses_expert(self) -> bool {
        self != Mode::RlOnly
    }

    pub fn default_batch(self) -> usize {
        match self {
            Mode::ImitationRl => 25,
            _ => 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Random-policy episodes collected before training.
    pub seed_episodes: usize,
    /// Update steps per environment episode.
    pub collect_interval: usize,
    /// Chunks per batch; `None` picks the mode default.
    pub batch_size: Option<usize>,
    pub chunk_length: usize,
    pub burn_in: usize,
    /// Expert episodes loaded into the expert dataset.
    pub expert_episodes: usize,
    /// `rho` in `targ <- rho * targ + (1 - rho) * value`.
    pub target_rate: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gamma: f64,
    pub exploration_std: f64,
    /// Per-group gradient norm above which gradients are rescaled.
    pub grad_norm_ceiling: f64,
    pub reward_scale: f64,
    pub policy_prior_scale: f64,
    pub free_nats: f64,
    pub policy_kl_floor: f64,
    pub action_draw: ActionDraw,
    pub n_obs_samples: usize,
    pub model_grad_in_imagination: bool,
    pub pretrain_iters: usize,
    pub total_iters: usize,
    /// Evaluate after every this many iterations; 0 disables.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Save a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Agent dataset capacity in episodes; `None` is unbounded.
    pub agent_capacity: Option<usize>,
    /// Fill the `wall_seconds` column. Off makes metrics files reproducible
    /// byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ImitationRl,
            seed: 0,
            seed_episodes: 40,
            collect_interval: 100,
            batch_size: None,
            chunk_length: 50,
            burn_in: 20,
            expert_episodes: 100,
            target_rate: 0.01,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gamma: 0.99,
            exploration_std: 0.3,
            grad_norm_ceiling: 1000.0,
            reward_scale: 100.0,
            policy_prior_scale: 10.0,
            free_nats: 3.0,
            policy_kl_floor: 0.6,
            action_draw: ActionDraw::Sample,
            n_obs_samples: 1,
            model_grad_in_imagination: false,
            pretrain_iters: 100,
            total_iters: 1000,
            eval_every: 10,
            eval_episodes: 10,
            checkpoint_every: 0,
            agent_capacity: None,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or_else(|| self.mode.default_batch())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            free_nats: self.free_nats,
            policy_kl_floor: self.policy_kl_floor,
            reward_scale: self.reward_scale,
            policy_prior_scale: self.policy_prior_scale,
            gamma: self.gamma,
            action_draw: self.action_draw,
            n_obs_samples: self.n_obs_samples,
            model_grad_in_imagination: self.model_grad_in_imagination,
        }
    }

    pub fn validate(&self, episode_length: usize) -> Result<()> {
        self.loss().validate()?;
        if self.batch() == 0 || self.collect_interval == 0 {
            return Err(Error::Config(
                "train.batch_size and train.collect_interval must be at least 1".into(),
            ));
        }
        if self.chunk_length < self.burn_in + 2 {
            return Err(Error::Config(format!(
                "train.chunk_length {} must be at least train.burn_in {} + 2",
                self.chunk_length, self.burn_in
            )));
        }
        if self.chunk_length > episode_length {
            return Err(Error::Config(format!(
                "train.chunk_length {} exceeds env.episode_length {episode_length}",
                self.chunk_length
            )));
        }
        if self.seed_episodes == 0 {
            return Err(Error::Config(
                "train.seed_episodes must be at least 1".into(),
            ));
        }
        if self.mode.uses_expert() && self.expert_episodes == 0 {
            return Err(Error::Config(
                "train.expert_episodes must be at least 1 in imitation modes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::Config("train.target_rate must lie in [0, 1]".into()));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_norm_ceiling", self.grad_norm_ceiling),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return Err(Error::Config(
                "train.exploration_std must be finite and nonnegative".into(),
            ));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::Config(
                "train.eval_episodes must be at least 1 when evaluating".into(),
            ));
        }
        if self.agent_capacity == Some(0) {
            return Err(Error::Config(
                "train.agent_capacity must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
