//! `pertforge`: build perturbation benchmarks, optimize prompts against
//! them, and export scores.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 run failure,
//! 3 backend failure during `optimize` (the run can be resumed).

mod build;
mod config;
mod error;
mod evaluate;
mod optimize;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{BackendKind, RunConfig};
use crate::error::{CliError, CliResult, Exit};

#[derive(Debug, Parser)]
#[command(name = "pertforge", version, about)]
struct Cli {
    /// Run configuration (TOML). Defaults to `pertforge.toml` in the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Continue the run in this directory from its last checkpoint.
    #[arg(long, global = true, value_name = "DIR")]
    resume: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build perturbed sub-datasets and the similarity report.
    Build(build::BuildArgs),
    /// Optimize a prompt against perturbed validation data.
    Optimize(optimize::OptimizeArgs),
    /// Score a prompt on clean and perturbed data.
    Evaluate(evaluate::EvaluateArgs),
    /// Summarize a run directory.
    Report(report::ReportArgs),
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from("pertforge.toml"));
    if cli.config.is_none() && !Path::new(&path).exists() {
        return Err(CliError::validation(
            "no --config given and no pertforge.toml in the working directory",
        ));
    }
    let mut config = RunConfig::load(&path)?;
    config.finish(cli.seed, cli.backend)?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    if cli.resume.is_some() && !matches!(cli.command, Command::Optimize(_)) {
        return Err(CliError::validation("--resume only applies to `optimize`"));
    }
    match &cli.command {
        Command::Build(args) => build::run(&load_config(cli)?, args),
        Command::Optimize(args) => optimize::run(&load_config(cli)?, args, cli.resume.as_deref()),
        Command::Evaluate(args) => evaluate::run(&load_config(cli)?, args),
        Command::Report(args) => report::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(&cli) {
        Ok(()) => ExitCode::from(Exit::Success as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(dir) = &e.checkpoint {
                eprintln!("checkpoint: {}", dir.display());
                eprintln!(
                    "resume with: pertforge optimize --resume {} ...",
                    dir.display()
                );
            }
            ExitCode::from(e.exit as u8)
        }
    }
}
