//! Expert and agent episode stores with uniform chunk sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::diffcore::Tensor;
use crate::envs::Episode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Expert,
    Agent,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    kind: DatasetKind,
    episodes: VecDeque<Episode>,
    episode_len: usize,
    capacity: Option<usize>,
}

/// A contiguous window of one stored episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeChunk {
    /// `[L, obs_dim]`
    pub observations: Tensor,
    /// `[L, action_dim]`
    pub actions: Tensor,
    /// `[L]`; absent for expert chunks.
    pub rewards: Option<Tensor>,
    pub burn_in: usize,
    pub episode: usize,
    pub start: usize,
}

impl Dataset {
    pub fn agent(episode_len: usize, capacity: Option<usize>) -> Self {
        Self {
            kind: DatasetKind::Agent,
            episodes: VecDeque::new(),
            episode_len,
            capacity,
        }
    }

    /// Expert data is fixed once loaded.
    pub fn expert(episodes: Vec<Episode>) -> Result<Self> {
        let episode_len = episodes
            .first()
            .map(Episode::len)
            .ok_or_else(|| Error::Config("expert dataset is empty".into()))?;
        if let Some(bad) = episodes.iter().find(|e| e.len() != episode_len) {
            return Err(Error::Contract(format!(
                "expert episode of length {} among length {episode_len}",
                bad.len()
            )));
        }
        Ok(Self {
            kind: DatasetKind::Expert,
            episodes: episodes.into(),
            episode_len,
            capacity: None,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Appends, evicting the oldest episode past capacity.
    pub fn add_episode(&mut self, episode: Episode) -> Result<()> {
        if self.kind == DatasetKind::Expert {
            return Err(Error::Contract(
                "expert dataset is immutable after load".into(),
            ));
        }
        if episode.len() != self.episode_len {
            return Err(Error::Contract(format!(
                "episode length {} != {}",
                episode.len(),
                self.episode_len
            )));
        }
        self.episodes.push_back(episode);
        if let Some(cap) = self.capacity {
            while self.episodes.len() > cap {
                self.episodes.pop_front();
            }
        }
        Ok(())
    }

    /// `batch` chunks of length `len`: episode uniform, then start uniform
    /// in `[0, T - len]`.
    pub fn sample_chunks<R: Rng>(
        &self,
        batch: usize,
        len: usize,
        burn_in: usize,
        rng: &mut R,
    ) -> Result<Vec<EpisodeChunk>> {
        if len == 0 || len > self.episode_len || self.episodes.is_empty() {
            return Err(Error::Contract(format!(
                "no episode can supply a chunk of length {len} ({} stored, length {})",
                self.episodes.len(),
                self.episode_len
            )));
        }
        if burn_in >= len {
            return Err(Error::Config(format!(
                "burn-in {burn_in} must be shorter than chunk length {len}"
            )));
        }
        let with_rewards = self.kind == DatasetKind::Agent;
        (0..batch)
            .map(|_| {
                let episode = rng.random_range(0..self.episodes.len());
                let start = rng.random_range(0..=self.episode_len - len);
                let ep = &self.episodes[episode];
                Ok(EpisodeChunk {
                    observations: rows(&ep.observations, start, len)?,
                    actions: rows(&ep.actions, start, len)?,
                    rewards: if with_rewards {
                        Some(Tensor::vector(
                            ep.rewards.data()[start..start + len].to_vec(),
                        ))
                    } else {
                        None
                    },
                    burn_in,
                    episode,
                    start,
                })
            })
            .collect()
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let d = t.last_dim();
    Tensor::new(
        vec![len, d],
        t.data()[start * d..(start + len) * d].to_vec(),
    )
}

/// Chunks regrouped time-major for batched network evaluation.
#[derive(Clone, Debug)]
pub struct ChunkBatch {
    /// `L` entries of `[B, obs_dim]`.
    pub obs: Vec<Tensor>,
    /// `L` entries of `[B, action_dim]`.
    pub actions: Vec<Tensor>,
    /// `L` entries of `[B]`, when every chunk carries rewards.
    pub rewards: Option<Vec<Tensor>>,
    pub burn_in: usize,
}

impl ChunkBatch {
    pub fn from_chunks(chunks: &[EpisodeChunk]) -> Result<Self> {
        let first = chunks
            .first()
            .ok_or_else(|| Error::Contract("empty chunk batch".into()))?;
        let len = first.observations.shape()[0];
        let burn_in = first.burn_in;
        if chunks
            .iter()
            .any(|c| c.observations.shape()[0] != len || c.burn_in != burn_in)
        {
            return Err(Error::Contract("chunks differ in length or burn-in".into()));
        }
        let stack = |get: &dyn Fn(&EpisodeChunk) -> &[f64], t: usize| -> Result<Tensor> {
            let rows: Vec<&[f64]> = chunks.iter().map(|c| get(c)).collect();
            let d = rows[0].len() / len;
            let slices: Vec<&[f64]> = rows.iter().map(|r| &r[t * d..(t + 1) * d]).collect();
            Tensor::from_rows(&slices)
        };
        let obs = (0..len)
            .map(|t| stack(&|c| c.observations.data(), t))
            .collect::<Result<_>>()?;
        let actions = (0..len)
            .map(|t| stack(&|c| c.actions.data(), t))
            .collect::<Result<_>>()?;
        let rewards = if chunks.iter().all(|c| c.rewards.is_some()) {
            Some(
                (0..len)
                    .map(|t| {
                        Tensor::vector(
                            chunks
                                .iter()
                                .map(|c| c.rewards.as_ref().expect("checked").data()[t])
                                .collect(),
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            obs,
            actions,
            rewards,
            burn_in,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.obs.first().map_or(0, |t| t.shape()[0])
    }
}
