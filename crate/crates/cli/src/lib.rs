//! Command implementations behind the `fenet` binary.

pub mod config;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use fenet::envs::{gen_expert_dataset, read_episodes, write_episodes, EpisodeFile, EpisodeHeader, ExpertQuality};
use fenet::nets::load_checkpoint;
use fenet::trainer::{evaluate, load_expert, read_metrics, train_to_dir, EvalStats, EventType, Trainer, METRICS_FILE};
use fenet::{Error, Result};

pub use config::{RunConfig, RESOLVED_CONFIG, SEED_FILE};

/// Process exit code for an error: 2 for numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Writes `n` expert episodes to `out` and returns their mean return.
pub fn cmd_gen_expert(cfg: &RunConfig, quality: ExpertQuality, n: usize, out: &Path, force: bool) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    refuse_existing(out, force)?;
    let episodes = gen_expert_dataset(&cfg.env, quality, n, cfg.seed)?;
    let mean = episodes.iter().map(|e| e.total_reward()).sum::<f64>() / n as f64;
    let file = EpisodeFile {
        header: EpisodeHeader {
            env: cfg.env.clone(),
            seed: cfg.seed,
            quality: Some(quality),
            n_episodes: n,
        },
        episodes,
    };
    write_episodes(out, &file)?;
    Ok(mean)
}

/// Trains into `cfg.output_dir`, which then holds the resolved config, the
/// seed, the metrics and the checkpoints.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<Option<EvalStats>> {
    let dir = &cfg.output_dir;
    refuse_existing(&dir.join(METRICS_FILE), force)?;
    let expert = load_expert(cfg.train.mode, || {
        let file = read_episodes(&cfg.expert_file).map_err(|e| {
            Error::Config(format!("cannot read expert file {}: {e}", cfg.expert_file.display()))
        })?;
        if file.header.env.name != cfg.env.name || file.header.env.episode_length != cfg.env.episode_length {
            return Err(Error::Config(format!(
                "expert file {} was generated for {:?} with episode length {}",
                cfg.expert_file.display(),
                file.header.env.name,
                file.header.env.episode_length
            )));
        }
        Ok(file.episodes)
    })?;
    let mut trainer = Trainer::new(cfg.env.clone(), cfg.net.clone(), cfg.train.clone(), expert)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.render())?;
    std::fs::write(dir.join(SEED_FILE), format!("{}\n", cfg.seed))?;
    train_to_dir(&mut trainer, dir)
}

/// Greedy evaluation of a checkpoint on the configured environment.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, n: usize) -> Result<(EvalStats, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let nets = load_checkpoint(checkpoint)?;
    if nets.config.obs_dim != cfg.env.obs_dim || nets.config.action_dim != cfg.env.action_dim {
        return Err(Error::Config(format!(
            "checkpoint expects obs/action dims {}/{}, environment has {}/{}",
            nets.config.obs_dim, nets.config.action_dim, cfg.env.obs_dim, cfg.env.action_dim
        )));
    }
    evaluate(&nets, &cfg.env, n)
}

pub const EXPORT_COLUMNS: [&str; 4] = ["iteration", "env_steps", "return_mean", "return_std"];

/// Validates a metrics file and writes one row per evaluation point.
/// Returns the number of rows written.
pub fn cmd_export<W: Write>(metrics: &Path, out: W) -> Result<usize> {
    let rows = read_metrics(BufReader::new(File::open(metrics)?))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(EXPORT_COLUMNS).map_err(csv_err)?;
    let mut n = 0;
    for r in rows.iter().filter(|r| r.event_type == Some(EventType::Eval)) {
        let field = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        w.write_record([
            r.iteration.to_string(),
            r.env_steps.to_string(),
            field(r.eval_return_mean),
            field(r.eval_return_std),
        ])
        .map_err(csv_err)?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Default output path of `export`: `tidy.csv` beside the metrics file.
pub fn default_export_path(metrics: &Path) -> PathBuf {
    metrics.with_file_name("tidy.csv")
}
