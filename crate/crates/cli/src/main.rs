//! `invariode`: train and certify neural-ODE classifiers and segway controllers.

// `!(a < b)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::CliError;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "invariode", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Train a classifier on the toy Gaussian task.
    TrainClassifier,
    /// Train the segway controller and its Lyapunov matrix.
    TrainController,
    /// Certify classifier robustness for each configured input.
    CertifyClassifier,
    /// Certify a forward-invariant level set of the closed loop.
    CertifyController,
    /// Simulate trajectories of the trained model.
    Rollout,
    /// Write simplex grid or decision-boundary samples.
    Sample,
    /// Emit the CSV data behind the trajectory and Lyapunov plots.
    ExportPlots,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config <FILE> is required".into()))?;
    let cfg = RunConfig::load(path).map_err(CliError::Usage)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let resolved = cfg.to_toml();
    eprintln!("seed = {}", cfg.seed);
    eprintln!("resolved config:\n{resolved}");
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let rc = cfg.output_dir.join("resolved_config.toml");
    std::fs::write(&rc, resolved).map_err(|e| CliError::io(&rc, e))?;
    match cli.command {
        Command::TrainClassifier => commands::train_classifier(&cfg),
        Command::TrainController => commands::train_controller(&cfg),
        Command::CertifyClassifier => commands::certify_classifier(&cfg),
        Command::CertifyController => commands::certify_controller(&cfg),
        Command::Rollout => commands::rollout(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::ExportPlots => commands::export_plots(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
