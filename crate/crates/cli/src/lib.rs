//! Experiment orchestration for the label-shift laboratory: data
//! generation, training, evaluation over shifted targets, sweeps and
//! calibration reports.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

use commands::Axis;

#[derive(Debug, Parser)]
#[command(
    name = "ladelab",
    version,
    about = "Label-shift experiments on synthetic worlds"
)]
pub struct Cli {
    /// Flat `section.key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Run seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the training set and every test set.
    GenData,
    /// Train the configured loss on the generated training set.
    Train,
    /// Score checkpoints on every shift point.
    Evaluate {
        /// Defaults to every `model_*.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Train and score over a grid of hyperparameters.
    Sweep {
        /// `lambda`, `alpha` or `mu`; repeat for a cartesian product.
        #[arg(long, required = true)]
        axis: Vec<Axis>,
    },
    /// Calibration tables on the balanced test set.
    Calibrate {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
}

impl Cli {
    /// Loads the config file and applies `--set`, `--seed` and `--out`.
    pub fn config(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("run.seed={seed}"));
        }
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }
}

/// Runs one subcommand and returns a one-line summary.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = cli.config()?;
    Ok(match &cli.command {
        Command::GenData => {
            let files = commands::gen_data(&cfg)?;
            format!("wrote {} files to {}", files.len(), cfg.output.dir)
        }
        Command::Train => {
            let (ckpt, hist) = commands::train(&cfg)?;
            format!("wrote {} and {}", ckpt.display(), hist.display())
        }
        Command::Evaluate { checkpoint } => {
            let record = commands::evaluate(&cfg, checkpoint)?;
            format!(
                "evaluated {} rows (config {})",
                record.rows.len(),
                record.config_hash
            )
        }
        Command::Sweep { axis } => {
            let (path, ran) = commands::sweep(&cfg, axis)?;
            format!("ran {ran} new sweep points into {}", path.display())
        }
        Command::Calibrate { checkpoint } => {
            let files = commands::calibrate(&cfg, checkpoint)?;
            format!("wrote {} calibration tables", files.len())
        }
    })
}
