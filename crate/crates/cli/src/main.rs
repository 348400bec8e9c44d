//! `uhpnet`: phantom cohorts, training, prediction and evaluation.
//!
//! Every subcommand reads `key=value` settings from `--config`, then applies
//! `--set key=value` overrides and finally its dedicated flags, and writes
//! the fully resolved settings next to its outputs.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Settings;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "uhpnet",
    version,
    about = "Nodule growth estimation with uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key=value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any setting, e.g. `--set epochs=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest and split.
    PhantomGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_nodules: Option<usize>,
        /// Fraction of nodules growing more than 2 mm.
        #[arg(long)]
        growth_mix: Option<f64>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train a U-HPNet (optionally an ablation setup) or a baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// uhpnet, URESNET, BAYES_TD, SPU or P2P_GAN.
        #[arg(long)]
        model: Option<String>,
        /// BD0, ID0, IDD0, IDAOD0 or U-HPNet.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict growth of one nodule, from a manifest entry or a raw patch.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        nodule_id: Option<String>,
        /// Raw 32×32 little-endian f32 baseline patch.
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long)]
        d0_mm: Option<f64>,
        #[arg(long)]
        days: Option<u32>,
        /// Number of Monte-Carlo samples.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a model on a manifest split under several ground truths.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train, test or all.
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated subset of RX0,RX1,RX2,MEAN,CLOSEST.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n_bootstrap: Option<usize>,
    },
}

fn resolve(
    mut s: Settings,
    common: &Common,
    flags: &[(&str, Option<String>)],
) -> Result<Settings, CliError> {
    if let Some(path) = &common.config {
        s.load_file(path)?;
    }
    s.apply_overrides(&common.overrides)?;
    let shared = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in shared.iter().chain(flags) {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    Ok(s)
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PhantomGen {
            common,
            n_nodules,
            growth_mix,
            test_fraction,
        } => {
            let flags = [
                ("n_nodules", text(&n_nodules)),
                ("growth_mix", text(&growth_mix)),
                ("test_fraction", text(&test_fraction)),
            ];
            commands::phantom_gen(&resolve(commands::phantom_gen_settings(), &common, &flags)?)
        }
        Command::Train {
            common,
            manifest,
            model,
            ablation,
            epochs,
            resume,
        } => {
            let flags = [
                ("manifest", path(&manifest)),
                ("model", model),
                ("ablation", ablation),
                ("epochs", text(&epochs)),
                ("resume", path(&resume)),
            ];
            commands::train(&resolve(commands::train_settings(), &common, &flags)?)
        }
        Command::Predict {
            common,
            checkpoint,
            manifest,
            nodule_id,
            patch,
            d0_mm,
            days,
            k,
        } => {
            let flags = [
                ("checkpoint", path(&checkpoint)),
                ("manifest", path(&manifest)),
                ("nodule_id", nodule_id),
                ("patch", path(&patch)),
                ("d0_mm", text(&d0_mm)),
                ("days", text(&days)),
                ("k", text(&k)),
            ];
            commands::predict_cmd(&resolve(commands::predict_settings(), &common, &flags)?)
        }
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
            split,
            modes,
            k,
            n_bootstrap,
        } => {
            let flags = [
                ("checkpoint", path(&checkpoint)),
                ("manifest", path(&manifest)),
                ("split", split),
                ("modes", modes),
                ("k", text(&k)),
                ("n_bootstrap", text(&n_bootstrap)),
            ];
            commands::evaluate_cmd(&resolve(commands::evaluate_settings(), &common, &flags)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
