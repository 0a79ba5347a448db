//! The training loop: alternating gradient updates on sampled chunks with
//! environment interaction, for each of the four agent modes.

mod config;
mod metrics;
mod optim;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Tensor, Var};
use crate::envs::{run_episode, Env, EnvSpec, Episode};
use crate::error::{Error, Result};
use crate::freeenergy::{loss_il, loss_rl, LossBreakdown};
use crate::nets::{polyak_update, save_checkpoint, Group, NetConfig, Networks};
use crate::replay::{ChunkBatch, Dataset};
use crate::rssm::{initial_state, observe_step, LatentState, Noise};

pub use config::{Mode, TrainConfig};
pub use metrics::{read_metrics, EventType, MetricsRow, MetricsWriter, METRICS_COLUMNS};
pub use optim::{clip_grad_norm, global_norm, Adam};

/// Groups updated by the optimizer, in metrics column order.
pub const TRAINED_GROUPS: [Group; 4] = [Group::Theta, Group::Phi, Group::Psi, Group::Omega];

/// Reset seeds of evaluation episodes start here, independent of the run seed.
pub const EVAL_SEED_BASE: u64 = 1_000_000;

const STREAM_SAMPLING: u64 = 1;
const STREAM_LOSS_NOISE: u64 = 2;
const STREAM_ACTING: u64 = 3;
const STREAM_ENV_SEEDS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Which objectives one update step minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub imitation: bool,
    pub reinforcement: bool,
}

impl Phase {
    /// Objectives of `mode` during the zero-based `iteration`.
    pub fn of(mode: Mode, iteration: usize, pretrain_iters: usize) -> Self {
        let (imitation, reinforcement) = match mode {
            Mode::ImitationRl => (true, true),
            Mode::PretrainedRl => (iteration < pretrain_iters, iteration >= pretrain_iters),
            Mode::RlOnly => (false, true),
            Mode::ImitationOnly => (true, false),
        };
        Self {
            imitation,
            reinforcement,
        }
    }
}

/// What one update step did.
#[derive(Clone, Debug)]
pub struct UpdateReport {
    pub phase: Phase,
    /// Sum of the imitation and reinforcement breakdowns.
    pub breakdown: LossBreakdown,
    /// Pre-clipping gradient norms of `theta`, `phi`, `psi`, `omega`;
    /// `None` for groups without a loss this step.
    pub grad_norms: [Option<f64>; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalStats {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// How an agent acts in the environment.
pub enum Acting<'a> {
    /// Policy mean on posterior means; no randomness.
    Greedy,
    /// Posterior samples, policy samples and added Gaussian noise.
    Explore { rng: &'a mut ChaCha8Rng, std: f64 },
}

/// Runs one episode with online filtering: each step infers the latent
/// state from the new observation, then picks an action from the policy
/// posterior.
pub fn run_policy_episode(
    nets: &Networks,
    env: &mut Env,
    seed: u64,
    acting: Acting<'_>,
) -> Result<Episode> {
    let mut g = Graph::new();
    let p = nets.params.bind_constant(&mut g);
    let a_dim = nets.config.action_dim;
    let (mut noise, mut explore) = match acting {
        Acting::Greedy => (Noise::Zero, None),
        Acting::Explore { rng, std } => {
            let noise = Noise::Sampled(ChaCha8Rng::seed_from_u64(rng.random()));
            let extra = Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("exploration noise: {e}")))?;
            (noise, Some((rng, extra)))
        }
    };
    let mut state: LatentState = initial_state(&mut g, nets, 1)?;
    let mut a_prev: Var = g.constant(Tensor::zeros(&[1, a_dim]));
    run_episode(env, seed, |env| {
        let o = g.constant(Tensor::new(
            vec![1, env.spec().obs_dim],
            env.observation().to_vec(),
        )?);
        state = observe_step(&mut g, nets, &p, &state, a_prev, o, &mut noise)?;
        let pi = nets.policy_posterior(&mut g, &p, state.u, state.h)?;
        let mut a = g.value(pi.mean).data().to_vec();
        if let Some((rng, extra)) = explore.as_mut() {
            let std = g.value(pi.std).data().to_vec();
            let eps = noise.eps(&mut g, &[a_dim]);
            for (i, v) in a.iter_mut().enumerate() {
                *v += std[i] * g.value(eps).data()[i] + extra.sample(*rng);
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "policy action",
            });
        }
        for v in &mut a {
            *v = v.clamp(-1.0, 1.0);
        }
        a_prev = g.constant(Tensor::new(vec![1, a_dim], a.clone())?);
        Ok(a)
    })
}

/// Greedy returns over `n` fixed evaluation seeds.
pub fn evaluate(nets: &Networks, spec: &EnvSpec, n: usize) -> Result<(EvalStats, Vec<f64>)> {
    let mut env = Env::new(spec.clone())?;
    let returns = (0..n as u64)
        .map(|i| {
            Ok(
                run_policy_episode(nets, &mut env, EVAL_SEED_BASE + i, Acting::Greedy)?
                    .total_reward(),
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((EvalStats::from_returns(&returns), returns))
}

/// Expert episodes for `mode`, or `None` without calling `load` when the
/// mode does not imitate.
pub fn load_expert<F>(mode: Mode, load: F) -> Result<Option<Vec<Episode>>>
where
    F: FnOnce() -> Result<Vec<Episode>>,
{
    if mode.uses_expert() {
        load().map(Some)
    } else {
        Ok(None)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    env_spec: EnvSpec,
    nets: Networks,
    env: Env,
    expert: Option<Dataset>,
    agent: Dataset,
    optims: Vec<Adam>,
    sampling: ChaCha8Rng,
    loss_noise: Noise,
    acting: ChaCha8Rng,
    env_seeds: ChaCha8Rng,
    iteration: usize,
    env_steps: usize,
    expert_draws: usize,
    started: Instant,
}

impl Trainer {
    /// Builds the agent and fills the agent dataset with `seed_episodes`
    /// uniformly random episodes. `expert` must hold at least
    /// `expert_episodes` episodes in imitation modes and is dropped
    /// otherwise.
    pub fn new(
        env_spec: EnvSpec,
        net: NetConfig,
        cfg: TrainConfig,
        expert: Option<Vec<Episode>>,
    ) -> Result<Self> {
        env_spec.validate()?;
        cfg.validate(env_spec.episode_length)?;
        if net.obs_dim != env_spec.obs_dim || net.action_dim != env_spec.action_dim {
            return Err(Error::Config(format!(
                "net.obs_dim/action_dim {}/{} do not match the environment's {}/{}",
                net.obs_dim, net.action_dim, env_spec.obs_dim, env_spec.action_dim
            )));
        }
        let expert = if cfg.mode.uses_expert() {
            let mut eps = expert.ok_or_else(|| {
                Error::Config(format!("mode {} needs expert data", cfg.mode.name()))
            })?;
            if eps.len() < cfg.expert_episodes {
                return Err(Error::Config(format!(
                    "expert data holds {} episodes, train.expert_episodes asks for {}",
                    eps.len(),
                    cfg.expert_episodes
                )));
            }
            eps.truncate(cfg.expert_episodes);
            if let Some(bad) = eps.iter().find(|e| {
                e.len() != env_spec.episode_length
                    || e.observations.last_dim() != env_spec.obs_dim
                    || e.actions.last_dim() != env_spec.action_dim
            }) {
                return Err(Error::Config(format!(
                    "expert episode shape {:?}/{:?} does not fit the environment",
                    bad.observations.shape(),
                    bad.actions.shape()
                )));
            }
            Some(Dataset::expert(eps)?)
        } else {
            None
        };
        let nets = Networks::new(net, cfg.seed)?;
        let optims = TRAINED_GROUPS
            .iter()
            .map(|&grp| {
                Adam::new(
                    nets.params.group(grp),
                    cfg.learning_rate,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                )
            })
            .collect();
        let mut t = Self {
            env: Env::new(env_spec.clone())?,
            agent: Dataset::agent(env_spec.episode_length, cfg.agent_capacity),
            sampling: stream(cfg.seed, STREAM_SAMPLING),
            loss_noise: Noise::Sampled(stream(cfg.seed, STREAM_LOSS_NOISE)),
            acting: stream(cfg.seed, STREAM_ACTING),
            env_seeds: stream(cfg.seed, STREAM_ENV_SEEDS),
            cfg,
            env_spec,
            nets,
            expert,
            optims,
            iteration: 0,
            env_steps: 0,
            expert_draws: 0,
            started: Instant::now(),
        };
        for _ in 0..t.cfg.seed_episodes {
            t.collect_random()?;
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn nets(&self) -> &Networks {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut Networks {
        &mut self.nets
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn agent_data(&self) -> &Dataset {
        &self.agent
    }

    pub fn expert_data(&self) -> Option<&Dataset> {
        self.expert.as_ref()
    }

    /// Expert chunk batches drawn so far.
    pub fn expert_draws(&self) -> usize {
        self.expert_draws
    }

    pub fn phase(&self) -> Phase {
        Phase::of(self.cfg.mode, self.iteration, self.cfg.pretrain_iters)
    }

    fn next_env_seed(&mut self) -> u64 {
        self.env_seeds.random()
    }

    fn collect_random(&mut self) -> Result<()> {
        let seed = self.next_env_seed();
        let a_dim = self.env_spec.action_dim;
        let rng = &mut self.acting;
        let ep = run_episode(&mut self.env, seed, |_| {
            Ok((0..a_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        })?;
        self.env_steps += ep.len();
        self.agent.add_episode(ep)
    }

    /// Runs the current policy for one episode and stores it in the agent
    /// dataset. `explore` adds posterior sampling and Gaussian action noise.
    pub fn collect_episode(&mut self, explore: bool) -> Result<f64> {
        let seed = self.next_env_seed();
        let acting = if explore {
            Acting::Explore {
                rng: &mut self.acting,
                std: self.cfg.exploration_std,
            }
        } else {
            Acting::Greedy
        };
        let ep = run_policy_episode(&self.nets, &mut self.env, seed, acting)?;
        let ret = ep.total_reward();
        self.env_steps += ep.len();
        self.agent.add_episode(ep)?;
        Ok(ret)
    }

    fn sample_batch(&mut self, expert: bool, batch: usize) -> Result<ChunkBatch> {
        let (len, p) = (self.cfg.chunk_length, self.cfg.burn_in);
        let data = if expert {
            self.expert_draws += 1;
            self.expert
                .as_ref()
                .ok_or_else(|| Error::Contract("imitation update without expert data".into()))?
        } else {
            &self.agent
        };
        let chunks = data.sample_chunks(batch, len, p, &mut self.sampling)?;
        ChunkBatch::from_chunks(&chunks)
    }

    /// One gradient step on `theta`, `phi`, `psi` from the phase's
    /// objectives, then on `omega` from the value loss when reinforcement is
    /// active, followed by the target update.
    pub fn update_step(&mut self) -> Result<UpdateReport> {
        let phase = self.phase();
        let b = self.cfg.batch();
        let expert = if phase.imitation {
            Some(self.sample_batch(true, b)?)
        } else {
            None
        };
        let agent = if phase.reinforcement {
            Some(self.sample_batch(false, b)?)
        } else {
            None
        };
        let loss_cfg = self.cfg.loss();

        let mut g = Graph::new();
        let p = self.nets.params.bind(&mut g, |grp| grp != Group::OmegaTarg);
        let mut parts = Vec::new();
        let mut breakdown = LossBreakdown::default();
        let mut value = None;
        if let Some(batch) = &expert {
            let out = loss_il(
                &mut g,
                &self.nets,
                &p,
                batch,
                &loss_cfg,
                &mut self.loss_noise,
            )
            .map_err(|e| diverged(e, "imitation", self.iteration, &breakdown))?;
            breakdown = breakdown.merge(&out.breakdown);
            parts.push(out.loss);
        }
        if let Some(batch) = &agent {
            let out = loss_rl(
                &mut g,
                &self.nets,
                &p,
                batch,
                &loss_cfg,
                &mut self.loss_noise,
            )
            .map_err(|e| diverged(e, "reinforcement", self.iteration, &breakdown))?;
            breakdown = breakdown.merge(&out.breakdown);
            parts.push(out.loss);
            value = out.value_loss;
        }
        let mut total = parts[0];
        for &part in &parts[1..] {
            total = g.add(total, part)?;
        }
        let diverged =
            !g.value(total).is_finite() || value.is_some_and(|v| !g.value(v).is_finite());
        if diverged {
            return Err(Error::Diverged(dump(self.iteration, &breakdown)));
        }

        let grads = g.backward(total)?;
        let mut grad_norms = [None; 4];
        let mut model_grads = Vec::with_capacity(3);
        for (k, grp) in TRAINED_GROUPS[..3].iter().enumerate() {
            let mut gs: Vec<Tensor> = p.group_vars(*grp).iter().map(|&v| grads.wrt(v)).collect();
            let (norm, _) = clip_grad_norm(&mut gs, self.cfg.grad_norm_ceiling);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} gradient is not finite; {}",
                    grp.name(),
                    dump(self.iteration, &breakdown)
                )));
            }
            grad_norms[k] = Some(norm);
            model_grads.push(gs);
        }
        let value_grads = match value {
            Some(v) => {
                let vg = g.backward(v)?;
                let mut gs: Vec<Tensor> = p
                    .group_vars(Group::Omega)
                    .iter()
                    .map(|&v| vg.wrt(v))
                    .collect();
                let (norm, _) = clip_grad_norm(&mut gs, self.cfg.grad_norm_ceiling);
                if !norm.is_finite() {
                    return Err(Error::Diverged(format!(
                        "omega gradient is not finite; {}",
                        dump(self.iteration, &breakdown)
                    )));
                }
                grad_norms[3] = Some(norm);
                Some(gs)
            }
            None => None,
        };
        drop(g);

        for (k, gs) in model_grads.iter().enumerate() {
            self.optims[k].step(self.nets.params.group_mut(TRAINED_GROUPS[k]), gs)?;
        }
        if let Some(gs) = value_grads {
            self.value_step(&gs)?;
        }
        Ok(UpdateReport {
            phase,
            breakdown,
            grad_norms,
        })
    }

    /// Adam step on `omega` with already clipped gradients, then the
    /// target update. Touches no other group.
    pub fn value_step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.optims[3].step(self.nets.params.group_mut(Group::Omega), grads)?;
        let (targ, src) = self.nets.params.pair_mut(Group::OmegaTarg, Group::Omega);
        polyak_update(targ, src, self.cfg.target_rate)
    }

    fn wall(&self) -> Option<f64> {
        self.cfg
            .log_wall_time
            .then(|| self.started.elapsed().as_secs_f64())
    }

    fn update_row(&self, iteration: usize, r: &UpdateReport) -> MetricsRow {
        let b = &r.breakdown;
        let rl = r.phase.reinforcement;
        MetricsRow {
            event_type: Some(EventType::Update),
            iteration,
            env_steps: self.env_steps,
            obs_nll: Some(b.obs_nll),
            policy_prior_nll: Some(b.policy_prior_nll),
            state_kl: Some(b.state_kl_raw),
            policy_kl: Some(b.policy_kl_raw),
            epistemic_kl: rl.then_some(b.epistemic_kl),
            expected_reward: rl.then_some(b.expected_reward),
            value_loss: rl.then_some(b.value_loss),
            grad_norm_theta: r.grad_norms[0],
            grad_norm_phi: r.grad_norms[1],
            grad_norm_psi: r.grad_norms[2],
            grad_norm_omega: r.grad_norms[3],
            wall_seconds: self.wall(),
            ..MetricsRow::default()
        }
    }

    pub fn evaluate(&self, n: usize) -> Result<EvalStats> {
        evaluate(&self.nets, &self.env_spec, n).map(|(s, _)| s)
    }

    /// One iteration: `collect_interval` updates, then one exploring
    /// episode, then an evaluation when due. Emits a metrics row per event.
    pub fn run_iteration<F>(&mut self, sink: &mut F) -> Result<()>
    where
        F: FnMut(&MetricsRow) -> Result<()>,
    {
        let it = self.iteration + 1;
        for _ in 0..self.cfg.collect_interval {
            let report = self.update_step()?;
            sink(&self.update_row(it, &report))?;
        }
        self.collect_episode(true)?;
        self.iteration = it;
        let due = self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0;
        if due || it == self.cfg.total_iters {
            let stats = self.evaluate(self.cfg.eval_episodes.max(1))?;
            sink(&MetricsRow {
                event_type: Some(EventType::Eval),
                iteration: it,
                env_steps: self.env_steps,
                eval_return_mean: Some(stats.mean),
                eval_return_std: Some(stats.std),
                wall_seconds: self.wall(),
                ..MetricsRow::default()
            })?;
        }
        Ok(())
    }

    /// Runs the remaining iterations up to `total_iters`.
    pub fn run<F>(&mut self, sink: &mut F) -> Result<()>
    where
        F: FnMut(&MetricsRow) -> Result<()>,
    {
        while self.iteration < self.cfg.total_iters {
            self.run_iteration(sink)?;
        }
        Ok(())
    }
}

/// Turns a numeric failure inside a loss into a divergence report carrying
/// the terms computed so far.
fn diverged(e: Error, objective: &str, iteration: usize, so_far: &LossBreakdown) -> Error {
    if e.is_numeric() {
        Error::Diverged(format!(
            "{e} in the {objective} loss; terms so far: {}",
            dump(iteration, so_far)
        ))
    } else {
        e
    }
}

fn dump(iteration: usize, b: &LossBreakdown) -> String {
    let fields: Vec<String> = b.fields().iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("iteration {iteration}: {}", fields.join(" "))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains to completion, writing `metrics.csv`, periodic
/// `iter_{k}.ckpt` files and `final.ckpt` into `dir`. Returns the last
/// evaluation.
pub fn train_to_dir(trainer: &mut Trainer, dir: &Path) -> Result<Option<EvalStats>> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?))?;
    let mut last = None;
    let every = trainer.cfg.checkpoint_every;
    while trainer.iteration < trainer.cfg.total_iters {
        trainer.run_iteration(&mut |row| {
            if row.event_type == Some(EventType::Eval) {
                last = Some(EvalStats {
                    mean: row.eval_return_mean.unwrap_or(0.0),
                    std: row.eval_return_std.unwrap_or(0.0),
                });
            }
            metrics.write(row)
        })?;
        metrics.flush()?;
        if every > 0 && trainer.iteration % every == 0 {
            save_checkpoint(
                &dir.join(format!("iter_{}.ckpt", trainer.iteration)),
                &trainer.nets,
            )?;
        }
    }
    metrics.flush()?;
    save_checkpoint(&dir.join(FINAL_CHECKPOINT), &trainer.nets)?;
    Ok(last)
}
