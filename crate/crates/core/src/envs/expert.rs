use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::episode::run_episode;
use super::{Env, EnvName, EnvSpec, Episode};
use crate::error::{Error, Result};

/// Gain multipliers of the suboptimal experts, found with [`calibrate_gain`]
/// on the default specs (dense rewards) to reach half the optimal mean return
/// over reset seeds `0..100`. Measured mean returns at calibration:
/// point mass 89.36 optimal, 44.68 suboptimal; pendulum 86.36 optimal,
/// 43.18 suboptimal.
pub const POINT_MASS_SUBOPTIMAL_GAIN: f64 = 0.116951;
pub const PENDULUM_SUBOPTIMAL_GAIN: f64 = 0.024255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertQuality {
    Optimal,
    Suboptimal,
}

impl ExpertQuality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(ExpertQuality::Optimal),
            "suboptimal" => Ok(ExpertQuality::Suboptimal),
            _ => Err(Error::Config(format!("unknown expert quality {s:?}"))),
        }
    }

    pub fn gain(self, env: EnvName) -> f64 {
        match (self, env) {
            (ExpertQuality::Optimal, _) => 1.0,
            (ExpertQuality::Suboptimal, EnvName::PointMass) => POINT_MASS_SUBOPTIMAL_GAIN,
            (ExpertQuality::Suboptimal, EnvName::Pendulum) => PENDULUM_SUBOPTIMAL_GAIN,
        }
    }
}

/// Returns of the expert at `gain` over reset seeds `seeds`.
pub fn expert_return(spec: &EnvSpec, gain: f64, seeds: std::ops::Range<u64>) -> Result<Vec<f64>> {
    let mut env = Env::new(spec.clone())?;
    seeds
        .map(|s| {
            Ok(run_episode(&mut env, s, |e| Ok(e.expert_action_with_gain(gain)))?.total_reward())
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bisects for the gain whose mean return over `episodes` reset seeds is
/// `fraction` of the full-gain mean.
pub fn calibrate_gain(spec: &EnvSpec, fraction: f64, episodes: u64) -> Result<f64> {
    let optimal = mean(&expert_return(spec, 1.0, 0..episodes)?);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if mean(&expert_return(spec, mid, 0..episodes)?) < fraction * optimal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Std of the Gaussian noise added to every executed expert action when
/// generating datasets. The recorded action is the executed one.
pub const EXPERT_ACTION_NOISE: f64 = 0.1;

/// `n` expert episodes acting with [`EXPERT_ACTION_NOISE`]; reset seeds and
/// action noise come from a generator seeded with `seed`.
pub fn gen_expert_dataset(
    spec: &EnvSpec,
    quality: ExpertQuality,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut env = Env::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, EXPERT_ACTION_NOISE).expect("positive std");
    (0..n)
        .map(|_| {
            let s = rng.random();
            run_episode(&mut env, s, |e| {
                Ok(e.expert_action(quality)
                    .into_iter()
                    .map(|a| (a + noise.sample(&mut rng)).clamp(-1.0, 1.0))
                    .collect())
            })
        })
        .collect()
}
