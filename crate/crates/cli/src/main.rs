//! `aclrec`: prepare data, simulate exposure, train ERM/PS/ACL recommenders,
//! evaluate them and aggregate reports.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "aclrec",
    version,
    about = "Adversarial counterfactual learning for recommendation"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, filter and split an interaction file.
    Prepare,
    /// Generate semi-synthetic clicks with oracle propensities.
    Simulate {
        /// Number of independent datasets (seeds seed, seed+1, ...).
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Train a recommender (mode erm, ps or acl).
    Train,
    /// Evaluate the trained checkpoint under each configured weighting.
    Evaluate,
    /// Aggregate evaluation reports of several runs into one table.
    Report {
        /// Run directories to aggregate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let loaded = config::load(cli.config.as_deref(), std::env::vars(), cli.seed)?;
    match cli.command {
        Command::Prepare => commands::prepare(&loaded, cli.out.as_deref()),
        Command::Simulate { replicates } => {
            commands::simulate(&loaded, cli.out.as_deref(), replicates)
        }
        Command::Train => commands::train(&loaded, cli.out.as_deref()),
        Command::Evaluate => commands::evaluate(&loaded, cli.out.as_deref()),
        Command::Report { runs } => {
            let out = commands::output_dir(&loaded.config, cli.out.as_deref())?;
            report::report(&runs, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACLREC_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
