//! `lsct` — synthesize paired waveform datasets, train the conversion
//! model, evaluate checkpoints, and run module-ablation sweeps.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use lsct_cli::commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, parse_mode, CliError};
use lsct_cli::config::resolve_config_path;

#[derive(Parser)]
#[command(
    name = "lsct",
    version,
    about = "Masked PPG-to-ABP waveform conversion: data, training, evaluation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-waveform dataset with an 80/10/10 split.
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of PPG/ABP pairs.
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        /// Generator seed; identical seeds reproduce identical bytes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Additive Gaussian noise level on both waveforms.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a model from a run-configuration file.
    Train {
        /// Run configuration (JSON). The LSCT_CONFIG environment variable,
        /// when set, takes precedence over this flag.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for the log, checkpoints, and config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated mask ratios in [0, 1).
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        mask_ratios: Vec<f64>,
        /// Report directory for CSV/JSON metrics and overlay plots.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every requested mode/seed combination and emit
    /// the median ablation table.
    Ablate {
        /// Run configuration (JSON). The LSCT_CONFIG environment variable,
        /// when set, takes precedence over this flag.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modes: cam-msek|full, cam-only, msek-only,
        /// nn-baseline|baseline.
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = [
                String::from("nn-baseline"),
                String::from("msek-only"),
                String::from("cam-only"),
                String::from("cam-msek"),
            ]
        )]
        modes: Vec<String>,
        /// Comma-separated training seeds; the table reports medians.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, pairs, seed, noise } => cmd_synth(&out, pairs, seed, noise),
        Command::Train { config, out } => {
            let config = resolve_config_path(config)?;
            cmd_train(&config, &out)
        }
        Command::Eval { checkpoint, manifest, mask_ratios, report } => {
            cmd_eval(&checkpoint, &manifest, &mask_ratios, &report)
        }
        Command::Ablate { config, out, modes, seeds } => {
            let config = resolve_config_path(config)?;
            let modes = modes
                .iter()
                .map(|m| parse_mode(m))
                .collect::<Result<Vec<_>, _>>()?;
            cmd_ablate(&config, &out, &modes, &seeds)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
