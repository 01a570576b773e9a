//! Command-line driver for `mosc-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mosc", version, about = "Multi-outcome synthetic control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration.
    #[arg(long, global = true, env = "MOSC_CONFIG")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "MOSC_OUT", default_value = "out")]
    pub out: PathBuf,

    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "MOSC_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Fit estimators; write weights, effects and fit metrics.
    Estimate,
    /// Joint conformal and placebo permutation tests.
    Infer,
    /// Pre-period diagnostics bundle.
    Diagnose,
    /// Staged donor-pool screening with per-stage audit files.
    Screen,
    /// Factor-model panels with ground truth.
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Infer => "infer",
            Command::Diagnose => "diagnose",
            Command::Screen => "screen",
            Command::Simulate => "simulate",
        }
    }
}

/// Runs one command; returns the files written.
pub fn run(command: Command, config: Option<&Path>, out: &Path, env: &[(String, String)]) -> CliResult<Vec<String>> {
    let lc = config::load(config, env)?;
    let mut dir = output::OutputDir::create(out, &lc.hash)?;
    match command {
        Command::Estimate => commands::estimate(&lc, &mut dir)?,
        Command::Infer => commands::infer(&lc, &mut dir)?,
        Command::Diagnose => commands::diagnose(&lc, &mut dir)?,
        Command::Screen => commands::screen(&lc, &mut dir)?,
        Command::Simulate => commands::simulate(&lc, &mut dir)?,
    }
    Ok(dir.written().to_vec())
}
