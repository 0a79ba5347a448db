use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Env, EnvSpec, ExpertQuality};
use crate::container::{read_container, write_container};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FENETEPS";
pub const EPISODE_VERSION: u32 = 1;

/// One full episode. Row `t` holds the observation seen before acting, the
/// action taken and the reward that followed.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[T, obs_dim]`
    pub observations: Tensor,
    /// `[T, action_dim]`
    pub actions: Tensor,
    /// `[T]`
    pub rewards: Tensor,
}

impl Episode {
    pub fn new(observations: Tensor, actions: Tensor, rewards: Tensor) -> Result<Self> {
        let t = rewards.numel();
        if observations.ndim() != 2 || actions.ndim() != 2 || rewards.ndim() != 1 {
            return Err(Error::dim("episode", "expected [T, obs], [T, act] and [T]"));
        }
        if observations.shape()[0] != t || actions.shape()[0] != t {
            return Err(Error::dim(
                "episode",
                format!(
                    "row counts {} / {} / {t} differ",
                    observations.shape()[0],
                    actions.shape()[0]
                ),
            ));
        }
        Ok(Self {
            observations,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.numel() == 0
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.data().iter().sum()
    }
}

/// Runs one episode from `reset(seed)` to the end, asking `policy` for each
/// action.
pub fn run_episode<F>(env: &mut Env, seed: u64, mut policy: F) -> Result<Episode>
where
    F: FnMut(&Env) -> Result<Vec<f64>>,
{
    env.reset(seed);
    let spec = env.spec().clone();
    let mut obs = Vec::with_capacity(spec.episode_length * spec.obs_dim);
    let mut acts = Vec::with_capacity(spec.episode_length * spec.action_dim);
    let mut rewards = Vec::with_capacity(spec.episode_length);
    while !env.done() {
        let a = policy(env)?;
        let tr = env.step(&a)?;
        obs.extend_from_slice(&tr.obs);
        acts.extend_from_slice(&tr.action);
        rewards.push(tr.reward);
    }
    let t = rewards.len();
    Episode::new(
        Tensor::new(vec![t, spec.obs_dim], obs)?,
        Tensor::new(vec![t, spec.action_dim], acts)?,
        Tensor::vector(rewards),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub env: EnvSpec,
    /// Seed the episode resets were derived from.
    pub seed: u64,
    pub quality: Option<ExpertQuality>,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFile {
    pub header: EpisodeHeader,
    pub episodes: Vec<Episode>,
}

/// Writes episodes stacked into `[N, T, ...]` arrays.
pub fn write_episodes(path: &Path, file: &EpisodeFile) -> Result<()> {
    let spec = &file.header.env;
    let n = file.episodes.len();
    if n != file.header.n_episodes {
        return Err(Error::Contract(format!(
            "header says {} episodes, got {n}",
            file.header.n_episodes
        )));
    }
    let t = spec.episode_length;
    if let Some(bad) = file.episodes.iter().find(|e| {
        e.len() != t
            || e.observations.last_dim() != spec.obs_dim
            || e.actions.last_dim() != spec.action_dim
    }) {
        return Err(Error::Contract(format!(
            "episode shape {:?} does not match the environment",
            bad.observations.shape()
        )));
    }
    let stack = |get: fn(&Episode) -> &Tensor, tail: &[usize]| -> Result<Tensor> {
        let data = file
            .episodes
            .iter()
            .flat_map(|e| get(e).data().iter().copied())
            .collect();
        let mut shape = vec![n, t];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    };
    let obs = stack(|e| &e.observations, &[spec.obs_dim])?;
    let acts = stack(|e| &e.actions, &[spec.action_dim])?;
    let rews = stack(|e| &e.rewards, &[])?;
    let header = serde_json::to_value(&file.header).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    write_container(
        &mut w,
        MAGIC,
        EPISODE_VERSION,
        &header,
        &[
            ("observations", &obs),
            ("actions", &acts),
            ("rewards", &rews),
        ],
    )?;
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<EpisodeFile> {
    let mut c = read_container(&mut BufReader::new(File::open(path)?), MAGIC)?;
    if c.version != EPISODE_VERSION {
        return Err(Error::Format(format!(
            "episode file version {} unsupported (expected {EPISODE_VERSION})",
            c.version
        )));
    }
    let header: EpisodeHeader = serde_json::from_value(c.header.clone())
        .map_err(|e| Error::Format(format!("episode header: {e}")))?;
    header.env.validate()?;
    let (n, t) = (header.n_episodes, header.env.episode_length);
    let (od, ad) = (header.env.obs_dim, header.env.action_dim);
    let obs = c.take("observations")?;
    let acts = c.take("actions")?;
    let rews = c.take("rewards")?;
    if obs.shape() != [n, t, od] || acts.shape() != [n, t, ad] || rews.shape() != [n, t] {
        return Err(Error::Format(format!(
            "array shapes {:?} {:?} {:?} disagree with the header",
            obs.shape(),
            acts.shape(),
            rews.shape()
        )));
    }
    let episodes = (0..n)
        .map(|i| {
            Episode::new(
                Tensor::new(
                    vec![t, od],
                    obs.data()[i * t * od..(i + 1) * t * od].to_vec(),
                )?,
                Tensor::new(
                    vec![t, ad],
                    acts.data()[i * t * ad..(i + 1) * t * ad].to_vec(),
                )?,
                Tensor::vector(rews.data()[i * t..(i + 1) * t].to_vec()),
            )
        })
        .collect::<Result<_>>()?;
    Ok(EpisodeFile { header, episodes })
}
