//! `simts` command-line front end.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "simts", version, about = "Self-supervised time series representations for forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the data-driven commands. Each flag overrides the
/// config-file key of the same name.
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// univariate or multivariate.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated forecast horizons.
    #[arg(long)]
    horizons: Option<String>,
    /// Output directory; defaults to $SIMTS_OUT_DIR, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stride: Option<String>,
    /// Also write SVG figures.
    #[arg(long)]
    plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write a checkpoint plus the loss history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Fit ridge heads on a checkpoint's representations and report test errors.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate the raw last-window mean as features.
        #[arg(long)]
        baseline: bool,
    },
    /// Train and evaluate several objectives under identical settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, at least two.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated training seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Finite-difference check of every differentiable op and objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a synthetic periodic series as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_features: Option<String>,
        #[arg(long)]
        length: Option<String>,
        /// `;` between features, `,` between periods of one feature.
        #[arg(long)]
        periods: Option<String>,
        #[arg(long)]
        noise_std: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(p) = &common.out {
        cfg.out = Some(p.clone());
    }
    cfg.plot |= common.plot;
    let flags = [
        ("mode", &common.mode),
        ("epochs", &common.epochs),
        ("seed", &common.seed),
        ("horizons", &common.horizons),
        ("stride", &common.stride),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, variant } => {
            commands::train(&resolve(&common, &[("variant", &variant)])?)
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => commands::eval(&resolve(&common, &[])?, &checkpoint, baseline),
        Command::Ablate {
            common,
            variants,
            seeds,
        } => commands::ablation(&resolve(&common, &[("variants", &variants), ("seeds", &seeds)])?),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault),
        Command::Synth {
            common,
            n_features,
            length,
            periods,
            noise_std,
        } => commands::synth(&resolve(
            &common,
            &[
                ("n_features", &n_features),
                ("length", &length),
                ("periods", &periods),
                ("noise_std", &noise_std),
            ],
        )?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
