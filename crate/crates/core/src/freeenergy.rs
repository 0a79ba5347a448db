//! Training objectives: per-step free energy on filtered data, one-step
//! expected free energy for imitation and reinforcement, and the value
//! regression loss.
//!
//! Every per-step term is a `[B]` vector of per-sequence scalars; KL floors
//! clamp those scalars. Batch losses are means over the post-burn-in window
//! and the batch.

use serde::{Deserialize, Serialize};

use crate::diffcore::{gaussian_nll, kl_diag_gaussian, Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, Group, Networks};
use crate::replay::ChunkBatch;
use crate::rssm::{
    burn_in, imagine_step, observe_step, ActionDraw, ImaginedStep, LatentState, Noise,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Floor on the state KL.
    pub free_nats: f64,
    /// Floor on the policy posterior/prior KL.
    pub policy_kl_floor: f64,
    /// Weight on reward likelihood and predicted reward.
    pub reward_scale: f64,
    /// Weight on the policy prior likelihood.
    pub policy_prior_scale: f64,
    pub gamma: f64,
    pub action_draw: ActionDraw,
    /// Imagined observations drawn per step for the epistemic term.
    pub n_obs_samples: usize,
    /// Let expected free energy gradients reach the model and state
    /// posterior parameters (off: only the policy posterior learns from it).
    pub model_grad_in_imagination: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            free_nats: 3.0,
            policy_kl_floor: 0.6,
            reward_scale: 100.0,
            policy_prior_scale: 10.0,
            gamma: 0.99,
            action_draw: ActionDraw::Sample,
            n_obs_samples: 1,
            model_grad_in_imagination: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("free_nats", self.free_nats),
            ("policy_kl_floor", self.policy_kl_floor),
            ("reward_scale", self.reward_scale),
            ("policy_prior_scale", self.policy_prior_scale),
        ];
        for (name, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "train.{name} must be finite and nonnegative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("train.gamma must lie in [0, 1]".into()));
        }
        if self.n_obs_samples == 0 {
            return Err(Error::Config(
                "train.n_obs_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Entropy of a unit-variance Gaussian over `dim` coordinates.
pub fn unit_gaussian_entropy(dim: usize) -> f64 {
    0.5 * dim as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// Terms of the free energy at one filtered step.
#[derive(Clone, Copy, Debug)]
pub struct StepTerms {
    pub obs_nll: Var,
    pub policy_prior_nll: Var,
    /// Present when a reward target was supplied.
    pub reward_nll: Option<Var>,
    pub state_kl_raw: Var,
    pub state_kl_clipped: Var,
    /// `obs_nll + s_pp * policy_prior_nll + s_r * reward_nll + clipped KL`
    pub total: Var,
}

/// Free energy of observing `obs` and `action` at a filtered state.
///
/// `reward_prev` is the reward received before this step; the reward head at
/// this state is scored against it.
pub fn free_energy_t(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    state: &LatentState,
    obs: Var,
    action: Var,
    reward_prev: Option<Var>,
    cfg: &LossConfig,
) -> Result<StepTerms> {
    let posterior = state.posterior.ok_or_else(|| {
        Error::Contract("free energy needs a filtered state with a posterior".into())
    })?;
    let obs_dist = nets.observation(g, p, state.u, state.h)?;
    let obs_nll = gaussian_nll(g, obs, &obs_dist)?;
    let pp = nets.policy_prior(g, p, state.u, state.h)?;
    let policy_prior_nll = gaussian_nll(g, action, &pp)?;
    let state_kl_raw = kl_diag_gaussian(g, &posterior, &state.prior)?;
    let state_kl_clipped = g.clamp_min(state_kl_raw, cfg.free_nats)?;

    let scaled_pp = g.scale(policy_prior_nll, cfg.policy_prior_scale)?;
    let mut total = g.add(obs_nll, scaled_pp)?;
    total = g.add(total, state_kl_clipped)?;
    let reward_nll = match reward_prev {
        Some(r) => {
            let batch = state.batch(g);
            let target = g.reshape(r, &[batch, 1])?;
            let dist = nets.reward(g, p, state.u, state.h)?;
            let nll = gaussian_nll(g, target, &dist)?;
            let scaled = g.scale(nll, cfg.reward_scale)?;
            total = g.add(total, scaled)?;
            Some(nll)
        }
        None => None,
    };
    Ok(StepTerms {
        obs_nll,
        policy_prior_nll,
        reward_nll,
        state_kl_raw,
        state_kl_clipped,
        total,
    })
}

fn policy_kl(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    state: &LatentState,
    floor: f64,
) -> Result<(Var, Var)> {
    let q = nets.policy_posterior(g, p, state.u, state.h)?;
    let prior = nets.policy_prior(g, p, state.u, state.h)?;
    let raw = kl_diag_gaussian(g, &q, &prior)?;
    let clipped = g.clamp_min(raw, floor)?;
    Ok((raw, clipped))
}

/// Expected free energy of the imitation objective one step ahead.
#[derive(Clone, Copy, Debug)]
pub struct IlTerms {
    /// Decoder entropy; constant under unit-variance likelihoods.
    pub entropy_const: f64,
    pub policy_kl_raw: Var,
    pub policy_kl_clipped: Var,
    /// `entropy_const + policy_kl_clipped`
    pub total: Var,
}

pub fn expected_fe_il(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    next: &ImaginedStep,
    cfg: &LossConfig,
) -> Result<IlTerms> {
    let (raw, clipped) = policy_kl(g, nets, p, &next.state, cfg.policy_kl_floor)?;
    let entropy_const = unit_gaussian_entropy(nets.config.obs_dim);
    let total = g.offset(clipped, entropy_const)?;
    Ok(IlTerms {
        entropy_const,
        policy_kl_raw: raw,
        policy_kl_clipped: clipped,
        total,
    })
}

/// Expected free energy of the reinforcement objective one step ahead.
#[derive(Clone, Copy, Debug)]
pub struct RlTerms {
    pub epistemic_kl: Var,
    /// Reward head mean at the first imagined state.
    pub expected_reward: Var,
    pub policy_kl_raw: Var,
    pub policy_kl_clipped: Var,
    /// `-epistemic_kl - s_r * expected_reward + policy_kl_clipped`
    pub g_rl: Var,
    /// `V_targ(u)` at the second imagined state, unscaled.
    pub bootstrap: Var,
    /// `g_rl + gamma * bootstrap`
    pub total: Var,
}

/// `next` is the imagined step from the filtered state, `after` the step
/// from `next`; only the value target is read at `after`.
///
/// The target network is evaluated on whatever parameters `p` binds for
/// `OmegaTarg`; callers bind it as a constant.
pub fn expected_fe_rl(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    next: &ImaginedStep,
    after: &ImaginedStep,
    cfg: &LossConfig,
    noise: &mut Noise,
) -> Result<RlTerms> {
    let s = &next.state;
    let mut epistemic_kl = None;
    for k in 0..cfg.n_obs_samples {
        let obs = if k == 0 {
            next.obs
        } else {
            let dist = nets.observation(g, p, s.u, s.h)?;
            let shape = g.shape(dist.mean).to_vec();
            let eps = noise.eps(g, &shape);
            dist.sample(g, eps)?
        };
        let post = nets.state_posterior(g, p, s.h, obs)?;
        let kl = kl_diag_gaussian(g, &post, &s.prior)?;
        epistemic_kl = Some(match epistemic_kl {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    let epistemic_kl = g.scale(
        epistemic_kl.expect("n_obs_samples >= 1"),
        1.0 / cfg.n_obs_samples as f64,
    )?;
    let (raw, clipped) = policy_kl(g, nets, p, s, cfg.policy_kl_floor)?;
    let scaled_r = g.scale(next.reward, cfg.reward_scale)?;
    let neg_epi = g.neg(epistemic_kl)?;
    let mut g_rl = g.sub(neg_epi, scaled_r)?;
    g_rl = g.add(g_rl, clipped)?;
    let bootstrap = nets.value_target(g, p, after.state.u, after.state.h)?;
    let discounted = g.scale(bootstrap, cfg.gamma)?;
    let total = g.add(g_rl, discounted)?;
    Ok(RlTerms {
        epistemic_kl,
        expected_reward: next.reward,
        policy_kl_raw: raw,
        policy_kl_clipped: clipped,
        g_rl,
        bootstrap,
        total,
    })
}

/// `(stop_grad(g_rl + gamma * bootstrap) - V(u))^2` at `state`, with the
/// state itself cut from the graph so only the value parameters see it.
pub fn value_loss(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    state: &LatentState,
    g_rl: Var,
    bootstrap: Var,
    gamma: f64,
) -> Result<Var> {
    let discounted = g.scale(bootstrap, gamma)?;
    let target = g.add(g_rl, discounted)?;
    let target = g.stop_gradient(target);
    let u = g.stop_gradient(state.u);
    let h = g.stop_gradient(state.h);
    let v = nets.value(g, p, u, h)?;
    let diff = g.sub(target, v)?;
    g.square(diff)
}

/// Batch means of every loss term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obs_nll: f64,
    pub policy_prior_nll: f64,
    pub reward_nll: f64,
    pub state_kl_raw: f64,
    pub state_kl_clipped: f64,
    pub obs_entropy_const: f64,
    pub policy_kl_raw: f64,
    pub policy_kl_clipped: f64,
    pub epistemic_kl: f64,
    pub expected_reward: f64,
    pub value_bootstrap: f64,
    pub value_loss: f64,
    pub total_il: f64,
    pub total_rl: f64,
}

impl LossBreakdown {
    /// `F_t` part shared by both objectives, without the reward likelihood.
    fn filtered_part(&self, cfg: &LossConfig) -> f64 {
        self.obs_nll + cfg.policy_prior_scale * self.policy_prior_nll + self.state_kl_clipped
    }

    pub fn reconstruct_il(&self, cfg: &LossConfig) -> f64 {
        self.filtered_part(cfg) + self.obs_entropy_const + self.policy_kl_clipped
    }

    pub fn reconstruct_rl(&self, cfg: &LossConfig) -> f64 {
        self.filtered_part(cfg) + cfg.reward_scale * self.reward_nll
            - self.epistemic_kl
            - cfg.reward_scale * self.expected_reward
            + self.policy_kl_clipped
            + cfg.gamma * self.value_bootstrap
    }

    /// Elementwise sum, for combining imitation and reinforcement parts of
    /// one update into a single record.
    pub fn merge(&self, other: &LossBreakdown) -> LossBreakdown {
        let a = self.fields();
        let b = other.fields();
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.1 + y.1).collect();
        LossBreakdown {
            obs_nll: v[0],
            policy_prior_nll: v[1],
            reward_nll: v[2],
            state_kl_raw: v[3],
            state_kl_clipped: v[4],
            obs_entropy_const: v[5],
            policy_kl_raw: v[6],
            policy_kl_clipped: v[7],
            epistemic_kl: v[8],
            expected_reward: v[9],
            value_bootstrap: v[10],
            value_loss: v[11],
            total_il: v[12],
            total_rl: v[13],
        }
    }

    /// Column values with names, for logging and diagnostics.
    pub fn fields(&self) -> [(&'static str, f64); 14] {
        [
            ("obs_nll", self.obs_nll),
            ("policy_prior_nll", self.policy_prior_nll),
            ("reward_nll", self.reward_nll),
            ("state_kl_raw", self.state_kl_raw),
            ("state_kl_clipped", self.state_kl_clipped),
            ("obs_entropy_const", self.obs_entropy_const),
            ("policy_kl_raw", self.policy_kl_raw),
            ("policy_kl_clipped", self.policy_kl_clipped),
            ("epistemic_kl", self.epistemic_kl),
            ("expected_reward", self.expected_reward),
            ("value_bootstrap", self.value_bootstrap),
            ("value_loss", self.value_loss),
            ("total_il", self.total_il),
            ("total_rl", self.total_rl),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Imitation,
    Reinforcement,
}

/// A batch loss on the graph plus its readable parts.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub objective: Objective,
    /// Loss for `theta`, `phi` and `psi`.
    pub loss: Var,
    /// Loss for `omega`; reinforcement only.
    pub value_loss: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// Per-step `[B]` terms collected over the window.
#[derive(Default)]
struct Acc(Vec<Var>);

impl Acc {
    fn push(&mut self, v: Var) {
        self.0.push(v);
    }

    fn mean(&self, g: &mut Graph) -> Result<Option<Var>> {
        if self.0.is_empty() {
            return Ok(None);
        }
        let all = g.concat(&self.0)?;
        g.mean(all).map(Some)
    }
}

fn read(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0])
}

/// `F_t + G^IL` averaged over the post-burn-in window and batch.
pub fn loss_il(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    batch: &ChunkBatch,
    cfg: &LossConfig,
    noise: &mut Noise,
) -> Result<LossOutput> {
    batch_loss(g, nets, p, batch, cfg, noise, Objective::Imitation)
}

/// `F_t + G^RL + gamma V_targ` averaged over the window and batch, with the
/// value regression loss alongside.
pub fn loss_rl(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    batch: &ChunkBatch,
    cfg: &LossConfig,
    noise: &mut Noise,
) -> Result<LossOutput> {
    batch_loss(g, nets, p, batch, cfg, noise, Objective::Reinforcement)
}

fn batch_loss(
    g: &mut Graph,
    nets: &Networks,
    p: &Bound,
    batch: &ChunkBatch,
    cfg: &LossConfig,
    noise: &mut Noise,
    objective: Objective,
) -> Result<LossOutput> {
    let len = batch.len();
    let pb = batch.burn_in;
    if len < pb + 2 {
        return Err(Error::Config(format!(
            "chunk length {len} must be at least burn-in {pb} + 2"
        )));
    }
    let rl = objective == Objective::Reinforcement;
    let rewards = match (&batch.rewards, rl) {
        (Some(r), true) => Some(r),
        (None, true) => {
            return Err(Error::Contract(
                "reinforcement loss needs reward-carrying chunks".into(),
            ))
        }
        _ => None,
    };
    let b = batch.batch();
    let obs: Vec<Var> = batch.obs.iter().map(|t| g.constant(t.clone())).collect();
    let actions: Vec<Var> = batch
        .actions
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();

    let (mut state, mut a_prev) = burn_in(g, nets, p, &obs[..pb], &actions[..pb], len, b, noise)?;
    let p_imag = if cfg.model_grad_in_imagination {
        p.clone()
    } else {
        p.detached(g, &[Group::Theta, Group::Phi])
    };

    let mut obs_nll = Acc::default();
    let mut pp_nll = Acc::default();
    let mut r_nll = Acc::default();
    let mut kl_raw = Acc::default();
    let mut kl_clip = Acc::default();
    let mut pkl_raw = Acc::default();
    let mut pkl_clip = Acc::default();
    let mut epi = Acc::default();
    let mut r_hat = Acc::default();
    let mut boot = Acc::default();
    let mut vloss = Acc::default();
    let mut expected = Acc::default();
    let mut entropy_const = 0.0;

    for t in pb..len {
        state = observe_step(g, nets, p, &state, a_prev, obs[t], noise)?;
        let r_prev = match rewards {
            Some(r) if t > 0 => Some(g.constant(r[t - 1].clone())),
            _ => None,
        };
        let f = free_energy_t(g, nets, p, &state, obs[t], actions[t], r_prev, cfg)?;
        obs_nll.push(f.obs_nll);
        pp_nll.push(f.policy_prior_nll);
        kl_raw.push(f.state_kl_raw);
        kl_clip.push(f.state_kl_clipped);
        if let Some(r) = f.reward_nll {
            r_nll.push(r);
        }

        let start = if cfg.model_grad_in_imagination {
            state
        } else {
            state.detach(g)
        };
        let next = imagine_step(g, nets, &p_imag, &start, cfg.action_draw, noise)?;
        if rl {
            let after = imagine_step(g, nets, &p_imag, &next.state, cfg.action_draw, noise)?;
            let e = expected_fe_rl(g, nets, &p_imag, &next, &after, cfg, noise)?;
            pkl_raw.push(e.policy_kl_raw);
            pkl_clip.push(e.policy_kl_clipped);
            epi.push(e.epistemic_kl);
            r_hat.push(e.expected_reward);
            boot.push(e.bootstrap);
            expected.push(e.total);
            vloss.push(value_loss(
                g,
                nets,
                p,
                &next.state,
                e.g_rl,
                e.bootstrap,
                cfg.gamma,
            )?);
        } else {
            let e = expected_fe_il(g, nets, &p_imag, &next, cfg)?;
            entropy_const = e.entropy_const;
            pkl_raw.push(e.policy_kl_raw);
            pkl_clip.push(e.policy_kl_clipped);
            expected.push(e.total);
        }
        a_prev = actions[t];
    }

    let m_obs = obs_nll.mean(g)?.expect("window is nonempty");
    let m_pp = pp_nll.mean(g)?.expect("window is nonempty");
    let m_kl = kl_clip.mean(g)?.expect("window is nonempty");
    let m_expected = expected.mean(g)?.expect("window is nonempty");
    let m_r = r_nll.mean(g)?;
    let scaled_pp = g.scale(m_pp, cfg.policy_prior_scale)?;
    let mut loss = g.add(m_obs, scaled_pp)?;
    loss = g.add(loss, m_kl)?;
    if let Some(m_r) = m_r {
        let scaled = g.scale(m_r, cfg.reward_scale)?;
        loss = g.add(loss, scaled)?;
    }
    loss = g.add(loss, m_expected)?;
    let value = vloss.mean(g)?;

    let m_kl_raw = kl_raw.mean(g)?;
    let m_pkl_raw = pkl_raw.mean(g)?;
    let m_pkl_clip = pkl_clip.mean(g)?;
    let m_epi = epi.mean(g)?;
    let m_r_hat = r_hat.mean(g)?;
    let m_boot = boot.mean(g)?;
    let total = read(g, Some(loss));
    let breakdown = LossBreakdown {
        obs_nll: read(g, Some(m_obs)),
        policy_prior_nll: read(g, Some(m_pp)),
        reward_nll: read(g, m_r),
        state_kl_raw: read(g, m_kl_raw),
        state_kl_clipped: read(g, Some(m_kl)),
        obs_entropy_const: entropy_const,
        policy_kl_raw: read(g, m_pkl_raw),
        policy_kl_clipped: read(g, m_pkl_clip),
        epistemic_kl: read(g, m_epi),
        expected_reward: read(g, m_r_hat),
        value_bootstrap: read(g, m_boot),
        value_loss: read(g, value),
        total_il: if rl { 0.0 } else { total },
        total_rl: if rl { total } else { 0.0 },
    };
    Ok(LossOutput {
        objective,
        loss,
        value_loss: value,
        breakdown,
    })
}
