//! convdysat: dynamic-graph embeddings with structural attention and
//! convolutional temporal attention, trained and scored from the command line.
//!
//! Exit codes: 0 ok, 2 bad input, 3 training divergence, 4 shape mismatch,
//! 5 failed gradient check.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use convdysat_core::graph::SnapshotMode;
use error::CliError;

#[derive(Parser)]
#[command(name = "convdysat", version, about)]
struct Cli {
    /// Cap on worker threads (1 = fully serial); CONVDYSAT_THREADS is the
    /// fallback when the flag is absent.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin an edge list into snapshots; write per-snapshot files and a manifest.
    Ingest {
        /// Edge list: "u v [weight] timestamp" per line, '#' comments.
        #[arg(long)]
        edges: PathBuf,
        /// Number of equal-width time bins (at least 2).
        #[arg(long)]
        steps: usize,
        /// "binned" (links live in their bin) or "cumulative" (links persist).
        #[arg(long, default_value = "binned")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train embeddings as described by a run config.
    Train {
        /// Flat dotted-key JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Continue from checkpoint.bin in the configured output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after N more epochs, checkpointing for a later --resume.
        #[arg(long, value_name = "N")]
        halt_after: Option<usize>,
    },
    /// Score a trained checkpoint with single-step link prediction.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to checkpoint.bin in the configured output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use seeds 1..=N instead of the configured seed list.
        #[arg(long, value_name = "N")]
        seeds: Option<u64>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "small")]
        sizes: String,
        /// Deliberately break one check to prove failures are caught.
        #[arg(long, hide = true)]
        corrupt_fixture: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Ingest {
            edges,
            steps,
            mode,
            out,
        } => {
            let mode = SnapshotMode::from_str(&mode).map_err(CliError::Config)?;
            commands::ingest(&edges, steps, mode, &out)
        }
        Command::Train {
            config,
            resume,
            halt_after,
        } => commands::train(&config, resume, halt_after),
        Command::Evaluate {
            config,
            checkpoint,
            seeds,
        } => commands::evaluate(&config, checkpoint, seeds),
        Command::Gradcheck {
            sizes,
            corrupt_fixture,
        } => commands::gradcheck(&sizes, corrupt_fixture),
    }
}

/// --threads wins, then CONVDYSAT_THREADS; otherwise rayon's default pool.
fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("CONVDYSAT_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
                CliError::Config(format!(
                    "CONVDYSAT_THREADS must be a positive integer, got \"{s}\""
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool setup failed: {e}")))?;
    }
    Ok(())
}
