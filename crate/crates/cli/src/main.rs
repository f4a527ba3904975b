//! `zigzag`: train attention gates, solve the layer assignment, and
//! benchmark KV-cache policies on a frozen toy transformer.
//!
//! Exit codes: 0 success, 1 input/config error, 2 numerical/training
//! error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zigzag_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "zigzag", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per-head gates by distillation and write the gate matrix
    TrainAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's model seed
        #[arg(long)]
        seed: Option<u64>,
        /// Load a serialized dataset instead of synthesizing one
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Solve the layer-exclusive assignment over the omega grid
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Trained gate matrix file
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train layer-granularity gates initialized from a solution
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Layer-assignment solution file
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Benchmark full / duo / zigzag decode across the configured grid
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact-match passkey retrieval accuracy per depth per policy
    EvalPasskey {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainAlpha { config, out, seed, dataset } => {
            let cfg = load_config(&config, seed)?;
            commands::train_alpha(&cfg, &out, dataset.as_deref())
        }
        Command::Optimize { config, alpha, out, seed } => {
            let cfg = load_config(&config, seed)?;
            commands::optimize(&cfg, &alpha, &out)
        }
        Command::Finetune { config, solution, out, seed, dataset } => {
            let cfg = load_config(&config, seed)?;
            commands::finetune(&cfg, &solution, &out, dataset.as_deref())
        }
        Command::Bench { config, alpha, solution, out, seed } => {
            let cfg = load_config(&config, seed)?;
            commands::bench(&cfg, &alpha, &solution, &out)
        }
        Command::EvalPasskey { config, alpha, solution, out, seed } => {
            let cfg = load_config(&config, seed)?;
            commands::eval_passkey(&cfg, &alpha, &solution, &out)
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) | Error::Training { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                // clap's own exit code conventions clash with ours; usage
                // problems are input errors
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
