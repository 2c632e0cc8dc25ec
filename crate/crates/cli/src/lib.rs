//! `spg` command-line front end: configs in, TOML reports out.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use spg_core::ErrorClass;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_MATH: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] spg_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.class() == ErrorClass::Math => EXIT_MATH,
            _ => EXIT_VALIDATION,
        }
    }

    /// What to change to get past the error, where there is a standard fix.
    pub fn hint(&self) -> Option<&'static str> {
        use spg_core::Error::*;
        match self {
            CliError::Core(NonPositiveGap { .. }) => Some("delta too large: choose delta below the smallest eigenvalue"),
            CliError::Core(DeltaTooLarge { .. }) => {
                Some("delta too large for the first-stage bound: lower delta or increase two_stage.k0_cap")
            }
            CliError::Core(CapExceeded(_)) => Some("increase k0_cap (or k_max), or relax delta / xi"),
            CliError::Core(Exhausted { .. }) => {
                Some("the feature file is too short for the first stage: add rows, lower k0_init, or use mode = \"direct\"")
            }
            CliError::Core(Singular(_)) => Some("use lambda_reg > 0 or a full-rank design"),
            CliError::Core(Degenerate(_)) => Some("the covariance has a zero eigenvalue; no finite K keeps it above delta"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    /// Unix seconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<C, R> {
    pub schema_version: String,
    pub command: String,
    pub inputs_echo: C,
    pub results: R,
    pub provenance: Provenance,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(command: &str, seed: u64, inputs_echo: C, results: R) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            schema_version: config::SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            inputs_echo,
            results,
            provenance: Provenance { seed, version: env!("CARGO_PKG_VERSION").to_string(), timestamp },
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "spg", version, about = "Minimal prompt lengths for a stable feature covariance floor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path (stdout when absent); for `gen`, the feature CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for Monte Carlo loops. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Drift,
    Tails,
    Dependence,
}

impl From<AxisArg> for spg_core::synth::StressAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Drift => Self::Drift,
            AxisArg::Tails => Self::Tails,
            AxisArg::Dependence => Self::Dependence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrateArg {
    Constants,
    Alpha,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample-size estimate from a feature file or generator.
    Estimate(CommonArgs),
    /// Knee of a performance curve.
    Knee(CommonArgs),
    /// Synthetic stress suite along one assumption axis.
    Stress {
        axis: AxisArg,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit bound constants or the one-shot alpha.
    Calibrate {
        kind: CalibrateArg,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo check of the predictive-variance bound.
    VarianceCheck(CommonArgs),
    /// Dump synthetic features to CSV.
    Gen(CommonArgs),
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Estimate(c) | Command::Knee(c) | Command::VarianceCheck(c) | Command::Gen(c) => c,
            Command::Stress { common, .. } | Command::Calibrate { common, .. } => common,
        }
    }
}

/// Runs a command and returns the report text. Side files (plot tables,
/// generated features, the report itself under `--out`) are written here.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let common = cli.command.common();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    let text = pool.install(|| commands::dispatch(&cli.command))?;
    if let (Some(out), false) = (&common.out, matches!(cli.command, Command::Gen(_))) {
        std::fs::write(out, &text)?;
    }
    Ok(text)
}
