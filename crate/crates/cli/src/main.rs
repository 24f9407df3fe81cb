//! Experiment harness for density-constrained RL runs.
//!
//! Exit codes: 0 on completion, 1 on configuration or usage errors,
//! 2 when a run aborts with an infeasibility diagnosis.

mod artifacts;
mod commands;
mod config;
mod problem;
mod sweep;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct CliError {
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { message: message.into() }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dcrl",
    about = "Run density-constrained RL experiments from TOML configs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured method and write per-iteration artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides run.out_dir).
        #[arg(long)]
        out: Option<String>,
        /// Root seed (overrides run.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the occupancy LP and report the duality check.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert density caps over a region into a value-constraint threshold.
    Convert {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every cell of a parameter grid and aggregate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel cell cap.
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let (run_config, dir) = load(&config, out, seed)?;
            commands::cmd_run(&run_config, &dir)
        }
        Command::Oracle { config, out, seed } => {
            let (run_config, dir) = load(&config, out, seed)?;
            commands::cmd_oracle(&run_config, &dir)
        }
        Command::Convert { config } => {
            let (run_config, dir) = load(&config, None, None)?;
            commands::cmd_convert(&run_config, &dir)
        }
        Command::Sweep { config, out, seed, workers } => {
            sweep::cmd_sweep(&config, out, seed, workers)
        }
    }
}

fn load(
    path: &Path,
    out: Option<String>,
    seed: Option<u64>,
) -> Result<(config::RunConfig, PathBuf), CliError> {
    let mut run_config = config::load_config(path)?;
    if let Some(out) = out {
        run_config.run.out_dir = out;
    }
    if let Some(seed) = seed {
        run_config.run.seed = seed;
    }
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((run_config, dir))
}
