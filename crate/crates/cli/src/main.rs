//! `driftcal`: generate synthetic streams, calibrate them, and summarise runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftcal_core::pipeline::Method;

#[derive(Parser)]
#[command(name = "driftcal", version, about = "Distance-aware calibration for class-incremental streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream with known ground truth
    Generate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run a calibration method over a stream and write its artifacts
    Calibrate {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides the method named in the config
        #[arg(short, long)]
        method: Option<Method>,
        /// Output directory; overrides the config
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Treat a fit that did not converge as a failure
        #[arg(long)]
        strict: bool,
    },
    /// Recompute metrics of a finished run without refitting
    Evaluate {
        #[arg(short, long)]
        run: PathBuf,
        /// Rerun test-time selection at this coverage threshold (dats runs only)
        #[arg(short, long)]
        threshold: Option<f64>,
        #[arg(short, long)]
        bins: Option<usize>,
        /// Directory for the recomputed report files
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Merge several runs into one set of comparison tables
    Report {
        #[arg(short, long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate { config } => commands::generate(&config),
        Command::Calibrate {
            config,
            method,
            out,
            strict,
        } => commands::calibrate(&config, method, out, strict),
        Command::Evaluate {
            run,
            threshold,
            bins,
            out,
        } => commands::evaluate(&run, threshold, bins, out),
        Command::Report { runs, out } => commands::report(&runs, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.kind.code())
        }
    }
}
