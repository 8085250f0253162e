//! Command-line front end for the personalized-FL compression simulator.
//!
//! Subcommands: `run` (single configuration, optionally replicated over
//! seeds), `sweep` (a (p, lambda) grid), and `theory` (constants report
//! without running). Configuration comes from a TOML file plus repeatable
//! `--set key=value` overrides; every field has a default.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal
//! invariant violation.

use std::fmt;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<l2gd_core::Error> for CliError {
    fn from(e: l2gd_core::Error) -> Self {
        use l2gd_core::Error::*;
        match e {
            Config(_) | Biased(_) => CliError::Config(e.to_string()),
            Data { .. } | Io(_) => CliError::Data(e.to_string()),
            NonFinite(_) | Invariant(_) => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "l2gd",
    version,
    about = "Personalized federated learning simulator with bidirectional compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; defaults apply when absent.
    #[arg(long)]
    config: Option<String>,
    /// Override a config field, e.g. --set p=0.4 or --set compressors.client.kind=natural.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<String>,
    /// Replication count (overrides the config's `seeds`).
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads for sweep points (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configuration and write trace, theory report, and summary.
    Run(CommonArgs),
    /// Execute a (p, lambda) grid and write the sweep surface.
    Sweep(CommonArgs),
    /// Compute the theory constants report without running.
    Theory(CommonArgs),
}

fn dispatch(args: &CommonArgs, which: fn(&config::Config, &std::path::Path) -> Result<(), CliError>)
    -> Result<(), CliError>
{
    let mut sets = args.set.clone();
    if let Some(seeds) = args.seeds {
        sets.push(format!("seeds={seeds}"));
    }
    let cfg = config::load(args.config.as_deref(), &sets)?;
    if let Some(jobs) = args.jobs {
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let out = commands::out_dir(&cfg, args.out.as_deref());
    which(&cfg, &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => dispatch(args, commands::cmd_run),
        Command::Sweep(args) => dispatch(args, commands::cmd_sweep),
        Command::Theory(args) => dispatch(args, commands::cmd_theory),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
