//! Command-line front end for the identification pipeline: loads a scenario
//! (built-in name or config file), runs it, and writes machine-readable
//! results into an output directory.
//!
//! Exit-code contract of the binary:
//! - `0` — success, all artifacts written;
//! - `1` — runtime failure after configuration succeeded (partial artifacts
//!   plus `error_report.json`);
//! - `2` — configuration error, nothing written.

pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{effective_config, resolve, RunArgs, RunConfig};
pub use report::{emit_error_report, emit_reports, summarize};

/// Top-level command line.
#[derive(Debug, Parser)]
#[command(
    name = "driftless",
    about = "Recover control vector fields of input-affine systems from perturbation experiments",
    version
)]
pub struct Cli {
    /// What to do.
    #[command(subcommand)]
    pub command: Command,
}

/// Available subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its result files.
    Run(RunArgs),
}

/// How a run failed, mapped to the exit-code contract.
#[derive(Debug)]
pub enum RunFailure {
    /// Bad flags, bad config file, unknown scenario, unwritable output
    /// directory: nothing has been written.
    Config(anyhow::Error),
    /// The pipeline or report stage failed; `error_report.json` is in place.
    Runtime(anyhow::Error),
}

impl RunFailure {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunFailure::Config(_) => 2,
            RunFailure::Runtime(_) => 1,
        }
    }

    /// Underlying message.
    pub fn message(&self) -> String {
        match self {
            RunFailure::Config(e) | RunFailure::Runtime(e) => format!("{e:#}"),
        }
    }
}

/// Execute the `run` subcommand; on success returns the written paths.
pub fn execute_run(args: &RunArgs) -> Result<Vec<PathBuf>, RunFailure> {
    // Configuration phase: everything here fails without touching the disk.
    let (scenario, effective) = config::resolve(args).map_err(RunFailure::Config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| {
        RunFailure::Config(anyhow::anyhow!(
            "cannot create output directory {}: {e}",
            args.out.display()
        ))
    })?;

    // Runtime phase: failures leave an error report next to any partial output.
    match driftless::scenarios::run_scenario(&scenario) {
        Ok(outcome) => {
            let written = report::emit_reports(&args.out, &scenario, &outcome, &effective)
                .map_err(|e| {
                    let _ = report::emit_error_report(&args.out, "report", &format!("{e:#}"));
                    RunFailure::Runtime(e)
                })?;
            print!("{}", report::summarize(&outcome));
            for path in &written {
                println!("wrote {}", path.display());
            }
            Ok(written)
        }
        Err(e) => {
            let message = format!("{e}");
            let _ = report::emit_error_report(&args.out, "pipeline", &message);
            Err(RunFailure::Runtime(anyhow::anyhow!(message)))
        }
    }
}
