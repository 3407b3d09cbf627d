//! `conserva`: runs the desk-scale experiments from a TOML configuration.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crate::config::ExperimentConfig;
use crate::output::Output;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Replica ensemble of the particle system.
    Simulate,
    /// Mean-field integration with monitors.
    Meanfield,
    /// Convergence of empirical densities to the mean field.
    Hydro,
    /// Fluctuation variance against the covariance flow.
    Fluct,
    /// Covariance decay and influence-set overlap.
    Indep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Meanfield => "meanfield",
            Command::Hydro => "hydro",
            Command::Fluct => "fluct",
            Command::Indep => "indep",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "conserva", version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Exit with status 4 when an acceptance threshold is missed.
    #[arg(long)]
    check: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> Result<commands::Check, Failure> {
    let resolved = ExperimentConfig::load(&cli.config)?.resolve(cli.seed)?;
    let out = Output::new(&cli.out, cli.command.name(), &resolved.config)?;
    match cli.command {
        Command::Simulate => commands::simulate(&resolved, &out, cli.check),
        Command::Meanfield => commands::meanfield(&resolved, &out, cli.check),
        Command::Hydro => commands::hydro(&resolved, &out, cli.check),
        Command::Fluct => commands::fluct(&resolved, &out, cli.check),
        Command::Indep => commands::indep(&resolved, &out, cli.check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(gate) if cli.check && !gate.passed() => {
            for f in &gate.failures {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(4)
        }
        Ok(_) => {
            if cli.check {
                eprintln!("check passed");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("conserva {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
