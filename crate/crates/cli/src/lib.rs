//! Command-line front end for channel pruning: train with a sparsity penalty
//! on batch-norm scales, remove the channels whose scale reached zero,
//! fine-tune, evaluate and inspect checkpoints.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "chanprune", version, about = "Channel pruning via sparse batch-norm scales")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override `dotted.key=value`; may be repeated.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch (or from --checkpoint) with ISTA on γ.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove zero-γ channels and fold their constant outputs downstream.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain SGD on a pruned model.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, loss, params and flops on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// γ histograms, per-layer penalties and a suggested α.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Output of a successful command: `stdout` is the report, `notes` go to stderr.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub notes: Vec<String>,
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set out_dir in the config"))
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Train { cfg, checkpoint, out } => {
            let cfg = load_config(cfg)?;
            let out = out_dir(out.as_deref(), &cfg)?;
            let s = commands::cmd_train(&cfg, checkpoint.as_deref(), &out)?;
            let notes = s.warnings.iter().map(|w| w.message().to_string()).collect();
            Ok(Output { stdout: s.render(), notes })
        }
        Command::Prune { checkpoint, out } => {
            let s = commands::cmd_prune(checkpoint, out)?;
            Ok(Output {
                stdout: format!("{}checkpoint: {}\n", s.report.summary(), s.checkpoint.display()),
                notes: s.notes,
            })
        }
        Command::Finetune { cfg, checkpoint, out } => {
            let cfg = load_config(cfg)?;
            let out = out_dir(out.as_deref(), &cfg)?;
            let (s, mut notes) = commands::cmd_finetune(&cfg, checkpoint, &out)?;
            notes.extend(s.warnings.iter().map(|w| w.message().to_string()));
            Ok(Output { stdout: s.render(), notes })
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = load_config(cfg)?;
            let out = out_dir(out.as_deref(), &cfg)?;
            let s = commands::cmd_eval(&cfg, checkpoint, &out)?;
            Ok(Output { stdout: s.to_csv(), notes: vec![] })
        }
        Command::Inspect { checkpoint, mu, rho, out } => {
            let text = commands::cmd_inspect(checkpoint, *mu, *rho, out.as_deref())?;
            Ok(Output { stdout: text, notes: vec![] })
        }
    }
}
