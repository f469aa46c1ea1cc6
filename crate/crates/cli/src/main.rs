//! `ltn`: pre-train, probe, align, ablate, and self-test from the command line.
//!
//! Exit codes: 0 success, 1 other failure (I/O, bad checkpoint, failed
//! self-test), 2 configuration error, 3 numerical abort.

mod commands;
mod pool;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ltn_core::LtnError;

#[derive(Parser, Debug)]
#[command(name = "ltn", version, about = "Latent time navigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureChoice {
    /// Pre-navigation representations.
    F,
    /// Time-blended representations.
    Blended,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch; writes a checkpoint, a metrics log, and the resolved config.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear-probe accuracy of frozen features.
    Probe {
        /// Config used to pre-train first when no checkpoint is given.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "checkpoint")]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "both")]
        features: FeatureChoice,
    },
    /// Time-order alignment on a noise-free stream; writes a report and CSV coordinates.
    Align {
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "checkpoint")]
        seed: Option<u64>,
    },
    /// One-axis sweeps over paired seeds, summarized in one table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// First seed; runs use `seed, seed + 1, ...`.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel runs; `LTN_DETERMINISTIC=1` forces one.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated subset of variant,basis_size,time_encoder,positives,framework.
        #[arg(long, value_delimiter = ',')]
        axes: Option<Vec<String>>,
    },
    /// Gradient checks and invariant suites.
    Selftest,
}

fn exit_code(err: &LtnError) -> u8 {
    match err {
        LtnError::Config { .. } => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn report(err: &LtnError) {
    match err {
        LtnError::Config { key, message } => eprintln!("config error: key `{key}`: {message}"),
        LtnError::Abort { step, source } => eprintln!("numerical abort at step {step}: {source}"),
        e if e.is_numerical() => eprintln!("numerical error: {e}"),
        e => eprintln!("error: {e}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out, seed } => commands::pretrain(config.as_deref(), &out, seed),
        Command::Probe {
            config,
            checkpoint,
            out,
            seed,
            features,
        } => commands::probe(config.as_deref(), checkpoint.as_deref(), &out, seed, features),
        Command::Align {
            config,
            checkpoint,
            out,
            seed,
        } => commands::align(config.as_deref(), checkpoint.as_deref(), &out, seed),
        Command::Ablate {
            config,
            out,
            seed,
            workers,
            seeds,
            axes,
        } => {
            let deterministic = std::env::var("LTN_DETERMINISTIC").is_ok_and(|v| v == "1");
            let workers = if deterministic { 1 } else { workers.max(1) };
            commands::ablate(config.as_deref(), &out, seed, workers, seeds, axes)
        }
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            report(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}
