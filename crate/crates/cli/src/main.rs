//! Command-line front end for the streaming video-generation toolkit.
//!
//! Exit codes: 0 on success, 1 for usage or input problems, 2 when training
//! or generation fails numerically.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use futurecast_core::TrainStage;

use commands::{cmd_ablate, cmd_bench, cmd_eval, cmd_stream, cmd_train, CliError};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "futurecast",
    version,
    about = "Train and run a toy streaming video-generation model with future-keyframe guidance"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory overriding the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for episode-parallel evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one training stage and write its checkpoint.
    Train {
        /// Which stage to run: teacher, pca, or fsf.
        #[arg(long, value_enum, default_value_t = StageArg::Teacher)]
        stage: StageArg,
    },
    /// Generate one video as a live stream and log its events.
    Stream,
    /// Score held-out episodes with the best available checkpoint.
    Eval,
    /// Score the fixed grid of training-stage x masking variants.
    Ablate,
    /// Measure generation throughput, cached versus dense recompute.
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum StageArg {
    Teacher,
    Pca,
    Fsf,
}

impl From<StageArg> for TrainStage {
    fn from(s: StageArg) -> TrainStage {
        match s {
            StageArg::Teacher => TrainStage::Teacher,
            StageArg::Pca => TrainStage::Pca,
            StageArg::Fsf => TrainStage::Fsf,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.as_deref(),
        workers: cli.workers,
    };
    let config = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Train { stage } => cmd_train(&config, stage.into()),
        Command::Stream => cmd_stream(&config),
        Command::Eval => cmd_eval(&config),
        Command::Ablate => cmd_ablate(&config),
        Command::Bench => cmd_bench(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors are usage errors.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
