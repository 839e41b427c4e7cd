//! `gymsmith`: serve the state API and run the verification toolkit.
//!
//! Exit codes: 0 success, 1 domain failure (FAIL verdict, findings, rejected
//! loop, gradient error over tolerance), 2 usage or configuration error.

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod commands;
mod config;

use commands::{DiffArgs, GcArgs, GspoCheckArgs, OrchestrateArgs, ScanArgs, ServeArgs, SliceArgs, VerifyArgs};
use config::{GlobalConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "gymsmith", version, about = "Verifiable environment toolkit")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the session-isolated state service.
    Serve(ServeArgs),
    /// Diff two state snapshots.
    Diff(DiffArgs),
    /// Scan a reward script for forbidden patterns.
    Scan(ScanArgs),
    /// Check a candidate tuple against the five agreement conditions.
    Verify(VerifyArgs),
    /// Run the generator/discriminator loop for one task.
    Orchestrate(OrchestrateArgs),
    /// Cut a trajectory into training slices.
    Slice(SliceArgs),
    /// Evaluate GSPO groups and check their gradients.
    GspoCheck(GspoCheckArgs),
    /// Remove idle sandbox environments under the output root.
    Gc(GcArgs),
}

/// Marks an error as caused by bad input or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(anyhow::Error);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(err: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(UsageError(err.into()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = GlobalConfig::resolve(&cli.overrides)?;
    match &cli.command {
        Command::Serve(args) => commands::serve(&cfg, args),
        Command::Diff(args) => commands::diff(&cfg, args),
        Command::Scan(args) => commands::scan(&cfg, args),
        Command::Verify(args) => commands::verify_cmd(&cfg, args),
        Command::Orchestrate(args) => commands::orchestrate(&cfg, args),
        Command::Slice(args) => commands::slice(args),
        Command::GspoCheck(args) => commands::gspo_check(args),
        Command::Gc(args) => commands::gc(&cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("GYMSMITH_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
