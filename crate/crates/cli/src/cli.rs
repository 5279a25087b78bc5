use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use qosnet_core::Metric;

use crate::commands;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "qosnet",
    version,
    about = "Uncertainty-aware QoS prediction from templated metadata"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model checkpoint (defaults to <workdir>/model.bin).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration JSON (defaults to <workdir>/calibration.json when present).
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    #[arg(long, global = true)]
    pub metric: Option<Metric>,
    #[arg(long, global = true)]
    pub density: Option<f64>,
    /// Train the first-position + MLP head instead of fusion and pooling.
    #[arg(long, global = true)]
    pub sft: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub missing_marker: Option<f64>,
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load tables and matrix, split by density, write JSONL splits and a manifest.
    Prepare,
    /// Train on the prepared splits; writes a checkpoint and CSV logs.
    Train,
    /// Fit the variance temperature on the validation split.
    Calibrate,
    /// MC-dropout predictions and diagnostics over the test split.
    Evaluate {
        /// Use the uncalibrated variance for every diagnostic.
        #[arg(long)]
        raw_var: bool,
    },
    /// Predict arbitrary JSONL examples (`feature` field required).
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rebuild the diagnostic files from a prediction dump.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        raw_var: bool,
    },
    /// Run the block-size / learning-rate / MC-pass grid, one workdir per point.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small generated dataset and a config for it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        users: usize,
        #[arg(long, default_value_t = 16)]
        services: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            metric: self.metric,
            density: self.density,
            sft: self.sft,
            seed: self.seed,
            missing_marker: self.missing_marker,
            workdir: self.workdir.clone(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = RunConfig::resolve(g.config.as_deref(), &g.overrides())?;
    let checkpoint = g.checkpoint.as_deref();
    let calibration = g.calibration.as_deref();
    match &cli.command {
        Command::Prepare => {
            commands::prepare(&cfg)?;
        }
        Command::Train => {
            commands::train(&cfg)?;
        }
        Command::Calibrate => {
            commands::calibrate(&cfg, checkpoint)?;
        }
        Command::Evaluate { raw_var } => {
            commands::evaluate(&cfg, checkpoint, calibration, *raw_var)?;
        }
        Command::Predict { input, output } => {
            let n = commands::predict(&cfg, checkpoint, calibration, input, output)?.len();
            log::info!("wrote {n} predictions to {}", output.display());
        }
        Command::Report {
            predictions,
            out,
            raw_var,
        } => {
            commands::report(&cfg, predictions, out, *raw_var)?;
        }
        Command::Sweep { out } => {
            commands::sweep(&cfg, out)?;
        }
        Command::Synth {
            out,
            users,
            services,
            noise,
        } => {
            commands::synth(out, *users, *services, *noise, cfg.seed)?;
            log::info!("wrote dataset and config.json to {}", out.display());
        }
    }
    Ok(())
}
