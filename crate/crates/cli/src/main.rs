use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fenet::envs::ExpertQuality;
use fenet::trainer::Mode;
use fenet::Result;
use fenet_cli::{cmd_eval, cmd_export, cmd_gen_expert, cmd_train, default_export_path, exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "fenet", version, about = "Train and evaluate free-energy agents on toy control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Zero rewards below 0.5.
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut flags: Vec<(&str, String)> = Vec::new();
        if self.sparse {
            flags.push(("env.reward_mode", "sparse".into()));
        }
        if let Some(s) = self.seed {
            flags.push(("seed", s.to_string()));
        }
        flags.extend_from_slice(extra);
        base.override_with(&flags)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert episodes.
    GenExpert {
        #[command(flatten)]
        common: Common,
        /// optimal or suboptimal
        #[arg(long, default_value = "suboptimal")]
        quality: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Episode file to write; defaults to paths.expert_file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train an agent.
    Train {
        #[command(flatten)]
        common: Common,
        /// imitation_rl, pretrained_rl, rl_only or imitation_only
        #[arg(long)]
        mode: Option<String>,
        /// Run directory; defaults to paths.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint with the policy mean.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Validate a metrics file and write one row per evaluation.
    Export {
        metrics: PathBuf,
        /// Defaults to tidy.csv beside the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenExpert {
            common,
            quality,
            n,
            out,
            force,
        } => {
            let quality = ExpertQuality::parse(&quality)?;
            let cfg = common.resolve(&[])?;
            let out = out.unwrap_or_else(|| cfg.expert_file.clone());
            let mean = cmd_gen_expert(&cfg, quality, n, &out, force)?;
            println!("wrote {n} episodes to {}; mean return {mean:.4}", out.display());
        }
        Command::Train {
            common,
            mode,
            out,
            force,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(("train.mode", Mode::parse(&m)?.name().to_string()));
            }
            if let Some(o) = out {
                extra.push(("paths.output_dir", o.display().to_string()));
            }
            let cfg = common.resolve(&extra)?;
            match cmd_train(&cfg, force)? {
                Some(s) => println!("final evaluation return {:.4} ± {:.4}", s.mean, s.std),
                None => println!("training finished without an evaluation"),
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Eval { checkpoint, common, n } => {
            let cfg = common.resolve(&[])?;
            let (stats, _) = cmd_eval(&cfg, &checkpoint, n)?;
            println!("mean return {:.4} std {:.4} over {n} episodes", stats.mean, stats.std);
        }
        Command::Export { metrics, out, force } => {
            let out = out.unwrap_or_else(|| default_export_path(&metrics));
            if out.exists() && !force {
                return Err(fenet::Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    out.display()
                )));
            }
            let n = cmd_export(&metrics, BufWriter::new(File::create(&out)?))?;
            println!("wrote {n} evaluation rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
