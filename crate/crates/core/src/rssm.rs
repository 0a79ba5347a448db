//! Recurrent state-space filtering and imagination.
//!
//! The latent state is split into a deterministic recurrent part `h` and a
//! stochastic part `u`. Filtering conditions `u` on each observation through
//! the state posterior; imagination rolls forward on the state prior with
//! actions drawn from the policy posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{DiagGaussian, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, Networks};

/// Source of the standard-normal `eps` used by every reparameterized draw.
#[derive(Clone, Debug)]
pub enum Noise {
    Sampled(ChaCha8Rng),
    /// `eps = 0`: every sample collapses onto its mean.
    Zero,
}

impl Noise {
    pub fn seeded(seed: u64) -> Self {
        Noise::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn eps(&mut self, g: &mut Graph, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        let data = match self {
            Noise::Sampled(rng) => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            Noise::Zero => vec![0.0; n],
        };
        g.constant(Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    /// `[B, h_dim]`
    pub h: Var,
    /// `[B, u_dim]`, a reparameterized draw.
    pub u: Var,
    pub prior: DiagGaussian,
    pub posterior: Option<DiagGaussian>,
}

impl LatentState {
    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.h)[0]
    }

    /// Same values with every gradient path cut.
    pub fn detach(&self, g: &mut Graph) -> Self {
        Self {
            h: g.stop_gradient(self.h),
            u: g.stop_gradient(self.u),
            prior: self.prior.detach(g),
            posterior: self.posterior.map(|p| p.detach(g)),
        }
    }
}

/// `h = 0`, `u = 0`, prior `N(0, 1)`.
pub fn initial_state(g: &mut Graph, nets: &Networks, batch: usize) -> Result<LatentState> {
    let c = &nets.config;
    let h = g.constant(Tensor::zeros(&[batch, c.h_dim]));
    let u = g.constant(Tensor::zeros(&[batch, c.u_dim]));
    let mean = g.constant(Tensor::zeros(&[batch, c.u_dim]));
    let std = g.constant(Tensor::full(&[batch, c.u_dim], 1.0));
    Ok(LatentState {
        h,
        u,
        prior: DiagGaussian::new(g, mean, std)?,
        posterior: None,
    })
}

/// One filtering step: advance `h` with the previous action, then condition
/// `u` on the new observation.
pub fn observe_step(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    prev: &LatentState,
    a_prev: Var,
    obs: Var,
    noise: &mut Noise,
) -> Result<LatentState> {
    let h = nets.transition(g, p, prev.h, prev.u, a_prev)?;
    let prior = nets.state_prior(g, p, h)?;
    let posterior = nets.state_posterior(g, p, h, obs)?;
    let eps = noise.eps(g, &[prev.batch(g), nets.config.u_dim]);
    let u = posterior.sample(g, eps)?;
    Ok(LatentState {
        h,
        u,
        prior,
        posterior: Some(posterior),
    })
}

/// How imagined actions are drawn from the policy posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDraw {
    /// `a = mean + std * eps`
    Sample,
    /// `a = mean`
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub struct ImaginedStep {
    /// State at `t + 1`.
    pub state: LatentState,
    /// `a_t`, the action taken from the previous state.
    pub action: Var,
    /// Observation drawn from `p(o_{t+1} | u_{t+1}, h_{t+1})`.
    pub obs: Var,
    /// Mean of the reward head at `t + 1`, which predicts `r_t`; shape `[B]`.
    pub reward: Var,
}

/// One step of latent imagination from `prev`.
pub fn imagine_step(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    prev: &LatentState,
    draw: ActionDraw,
    noise: &mut Noise,
) -> Result<ImaginedStep> {
    let batch = prev.batch(g);
    let c = &nets.config;
    let policy = nets.policy_posterior(g, p, prev.u, prev.h)?;
    let action = match draw {
        ActionDraw::Sample => {
            let eps = noise.eps(g, &[batch, c.action_dim]);
            policy.sample(g, eps)?
        }
        ActionDraw::Mean => policy.mean,
    };
    let h = nets.transition(g, p, prev.h, prev.u, action)?;
    let prior = nets.state_prior(g, p, h)?;
    let eps = noise.eps(g, &[batch, c.u_dim]);
    let u = prior.sample(g, eps)?;
    let obs_dist = nets.observation(g, p, u, h)?;
    let eps = noise.eps(g, &[batch, c.obs_dim]);
    let obs = obs_dist.sample(g, eps)?;
    let reward = nets.reward(g, p, u, h)?;
    let reward = g.reshape(reward.mean, &[batch])?;
    Ok(ImaginedStep {
        state: LatentState {
            h,
            u,
            prior,
            posterior: None,
        },
        action,
        obs,
        reward,
    })
}

/// Filters over a chunk prefix and returns the last state with every
/// gradient path cut, together with the last prefix action (the action that
/// leads into the first trained step).
///
/// `obs` and `actions` hold the first `P` steps of a chunk of length
/// `chunk_len`; `P = 0` yields the initial state and a zero action.
pub fn burn_in(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    obs: &[Var],
    actions: &[Var],
    chunk_len: usize,
    batch: usize,
    noise: &mut Noise,
) -> Result<(LatentState, Var)> {
    if obs.len() >= chunk_len {
        return Err(Error::Config(format!(
            "burn-in {} must be shorter than chunk length {chunk_len}",
            obs.len()
        )));
    }
    if obs.len() != actions.len() {
        return Err(Error::dim(
            "burn_in",
            "observation and action counts differ",
        ));
    }
    let mut state = initial_state(g, nets, batch)?;
    let mut a_prev = g.constant(Tensor::zeros(&[batch, nets.config.action_dim]));
    for (&o, &a) in obs.iter().zip(actions) {
        state = observe_step(g, nets, p, &state, a_prev, o, noise)?;
        a_prev = a;
    }
    if obs.is_empty() {
        return Ok((state, a_prev));
    }
    Ok((state.detach(g), g.stop_gradient(a_prev)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    Filtered,
    Imagined,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub mode: RolloutMode,
    pub states: Vec<LatentState>,
    /// Imagined mode only: one action, observation and reward per state.
    pub actions: Vec<Var>,
    pub obs: Vec<Var>,
    pub rewards: Vec<Var>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Filters a whole sequence from the initial state. `actions[t]` is the
/// action taken after `obs[t]`; step `t` consumes `actions[t - 1]`.
pub fn filter(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    obs: &[Var],
    actions: &[Var],
    noise: &mut Noise,
) -> Result<Rollout> {
    let first = obs
        .first()
        .ok_or_else(|| Error::Contract("rollout needs at least one observation".into()))?;
    let batch = g.shape(*first)[0];
    let mut state = initial_state(g, nets, batch)?;
    let mut a_prev = g.constant(Tensor::zeros(&[batch, nets.config.action_dim]));
    let mut states = Vec::with_capacity(obs.len());
    for (t, &o) in obs.iter().enumerate() {
        state = observe_step(g, nets, p, &state, a_prev, o, noise)?;
        states.push(state);
        if let Some(&a) = actions.get(t) {
            a_prev = a;
        }
    }
    Ok(Rollout {
        mode: RolloutMode::Filtered,
        states,
        actions: Vec::new(),
        obs: Vec::new(),
        rewards: Vec::new(),
    })
}

/// `n` imagined steps from `start`.
pub fn imagine(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    start: &LatentState,
    n: usize,
    draw: ActionDraw,
    noise: &mut Noise,
) -> Result<Rollout> {
    if n == 0 {
        return Err(Error::Contract(
            "imagined rollout needs at least one step".into(),
        ));
    }
    let mut out = Rollout {
        mode: RolloutMode::Imagined,
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        obs: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
    };
    let mut state = *start;
    for _ in 0..n {
        let step = imagine_step(g, nets, p, &state, draw, noise)?;
        state = step.state;
        out.states.push(step.state);
        out.actions.push(step.action);
        out.obs.push(step.obs);
        out.rewards.push(step.reward);
    }
    Ok(out)
}
