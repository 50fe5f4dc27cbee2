use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vhempc_cli::commands::{simulate, sweep, sweep_exit_code, table1, table1_exit_code};
use vhempc_cli::config::ExperimentConfig;
use vhempc_cli::CliError;

/// Variable-horizon economic MPC experiments.
///
/// Configs are TOML. Required keys: `plant` ("scalar" or "cstr") and `x0`
/// (plant coordinates). Optional keys and defaults: filter = "pi3",
/// kappa = 0.5, upsilon = 1.0, sigma = 0 (either may be a per-step list,
/// cycled), max_steps = 150, terminal_steps = 20, seed = 12648430,
/// repeats = 5, record_all_filters = false; lambda, d, b and psi_fraction
/// default to the plant's values. `sweep` reads `[sweep] settings =
/// [{upsilon = .., sigma = ..}, ..]`; `table1` reads `[table1] b_grid`.
/// VHEMPC_SEED overrides the seed.
///
/// Exit codes: 0 success, 1 invariant or runtime failure, 2 config error,
/// 3 initialization error.
#[derive(Parser)]
#[command(name = "vhempc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write trace.csv, certificate.json and panel CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one closed loop per (upsilon, sigma) setting and write summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Minimal initial horizon for each b in the grid; writes table1.csv.
    Table1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let (path, out) = match &cli.command {
        Command::Simulate { config, out } | Command::Sweep { config, out, .. } | Command::Table1 { config, out } => {
            (config, out)
        }
    };
    let cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match cli.command {
        Command::Simulate { .. } => match simulate(&cfg, out) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Sweep { jobs, .. } => match sweep(&cfg, out, jobs) {
            Ok(outcomes) => ExitCode::from(sweep_exit_code(&outcomes) as u8),
            Err(e) => fail(e),
        },
        Command::Table1 { .. } => match table1(&cfg, out) {
            Ok((rows, _)) => ExitCode::from(table1_exit_code(&rows) as u8),
            Err(e) => fail(e),
        },
    }
}
