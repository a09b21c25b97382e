//! Command-line front end: dataset generation, training, evaluation and
//! heatmap emission with reproducible run manifests.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

mod commands;
mod manifest;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cineseg", version, about = "Weak-label cineloop segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset
    Gen {
        /// Phantom config JSON
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per cross-validation fold
    Train {
        /// Dataset directory (from `gen`)
        #[arg(long)]
        data: PathBuf,
        /// Train config JSON
        #[arg(long)]
        config: PathBuf,
        /// Output run directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a finished run on its held-out folds
    Eval {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Run directory (from `train`)
        #[arg(long)]
        run: PathBuf,
    },
    /// Render the prediction heatmap of one core as PGM
    Heatmap {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Run directory
        #[arg(long)]
        run: PathBuf,
        /// Core id from cores.jsonl
        #[arg(long)]
        core: u64,
        /// Output PGM path
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors split by exit code.
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("CINESEG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                // ignore failure when a pool already exists (tests)
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { config, out } => commands::cmd_gen(config, out),
        Command::Train { data, config, out } => commands::cmd_train(data, config, out),
        Command::Eval { data, run } => commands::cmd_eval(data, run),
        Command::Heatmap { data, run, core, out } => commands::cmd_heatmap(data, run, *core, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.message());
            ExitCode::from(e.code())
        }
    }
}
