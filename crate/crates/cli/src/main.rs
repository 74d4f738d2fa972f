//! Command-line front end: configure and launch shaping runs, mode
//! comparisons, descent analyses, and operator probes.
//!
//! Exit codes: 0 on success, 1 on configuration or user error, 2 for a run
//! that completed by hitting the divergence guard.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{load_config, AnalyzeConfig, ProbeConfig, RunConfig};

#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn config(message: String) -> Self {
        Self(message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(
    name = "spamp",
    version,
    about = "Statistics-driven gradient shaping workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value by dotted path, e.g. --set pipeline.mode=spamp
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run and write run.csv and summary.json.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run modes x seeds with identical setup and tabulate the results.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated shaping modes (at least two).
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Evaluate the expected clipped descent over an (eta, tau) grid.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Probe a shaping operator's norm map for slope discontinuities.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { common, seed } => {
            let config: RunConfig = load_config(&common.config, &common.set, seed)?;
            commands::cmd_run(config, common.out)
        }
        Command::Compare {
            common,
            modes,
            seeds,
        } => {
            let config: RunConfig = load_config(&common.config, &common.set, None)?;
            commands::cmd_compare(config, modes, seeds, common.out)
        }
        Command::Analyze { common, seed } => {
            let config: AnalyzeConfig = load_config(&common.config, &common.set, seed)?;
            commands::cmd_analyze(config, common.out)
        }
        Command::Probe { common } => {
            let config: ProbeConfig = load_config(&common.config, &common.set, None)?;
            commands::cmd_probe(config, common.out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}
