//! `fdia`: synthetic data generation, autoencoder training, threshold
//! calibration and attack experiments on the DC grid model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::ConfigError;
use crate::config::{Options, Settings};

#[derive(Parser)]
#[command(name = "fdia", version, about = "False data injection attack detection pipeline")]
struct Cli {
    /// TOML config file; its keys are the long flag names
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the dataset CSV and its metadata sidecar
    GenData,
    /// Train the autoencoder and write the model and loss log
    Train,
    /// Set the detection threshold from validation errors
    Calibrate,
    /// Single-attack trace and confusion counts for the configured attack
    Attack,
    /// Score feature vectors with the calibrated detector
    Detect,
    /// Detection probability against load-reduction magnitude
    Evaluate,
    /// Residual detector versus autoencoder under attacker reactance errors
    Compare,
}

fn settings(cli: Cli) -> anyhow::Result<Settings> {
    let file = match &cli.config {
        Some(p) => Options::from_file(p)?,
        None => Options::default(),
    };
    Settings::resolve(file.overridden_by(cli.options))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command;
    let s = match settings(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(s.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match command {
        Command::GenData => commands::gen_data(&s),
        Command::Train => commands::train(&s),
        Command::Calibrate => commands::calibrate(&s),
        Command::Attack => commands::attack(&s),
        Command::Detect => commands::detect(&s),
        Command::Evaluate => commands::evaluate(&s),
        Command::Compare => commands::compare(&s),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
