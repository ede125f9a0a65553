//! `ffs`: command-line front end for the feature-synthesis toolkit.
//!
//! Exit status: 0 on success, 1 on runtime or IO errors, 2 on configuration
//! errors.

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ffs", version, about = "Normalizing-flow feature synthesis for outlier detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train / val / ood feature files (CSV and binary).
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train flow and heads; writes checkpoint, loss history and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train on this feature file instead of generating data from the config.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Fix the energy threshold at 95% inlier acceptance.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metrics JSON on validation and OOD records.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize outliers from a trained flow.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "rejection")]
        mode: String,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        s: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 500)]
        max_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inlier file used to estimate δ; required for projection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-likelihood histograms of inliers, background and synthetic outliers.
    ExportHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[command(flatten)]
        synth: commands::SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA projection of inliers and synthetic outliers.
    ExportPca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        synth: commands::SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of a parameter grid for each seed.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(spec.as_deref(), &out),
        Command::Train { config, out, train } => commands::train(config.as_deref(), &out, train.as_deref()),
        Command::Calibrate { checkpoint, val, out } => commands::calibrate(&checkpoint, &val, &out),
        Command::Eval { checkpoint, val, ood, out } => commands::eval(&checkpoint, &val, &ood, &out),
        Command::Sample { checkpoint, mode, k, s, tau, max_steps, seed, val, out } => {
            commands::sample(&checkpoint, &mode, k, s, tau, max_steps, seed, val.as_deref(), &out)
        }
        Command::ExportHist { checkpoint, val, bins, synth, out } => commands::export_hist(&checkpoint, &val, bins, &synth, &out),
        Command::ExportPca { checkpoint, val, synth, out } => commands::export_pca(&checkpoint, &val, &synth, &out),
        Command::Sweep { config, grid, out } => sweep::run(config.as_deref(), &grid, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
