//! Thin command-line entry point; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpvconv::commands;

#[derive(Parser)]
#[command(
    name = "mpvconv",
    about = "Point-voxel convolution segmentation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path; the metrics log lands at <out>.log.
        #[arg(long)]
        out: PathBuf,
        /// Override train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every gradient against central differences.
    Gradcheck {
        /// Base seed for the check instances (default: built-in seeds).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configuration variants and tabulate their validation mIoU.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the kernels at representative sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Train { config, out, seed } => commands::cmd_train(config, out, *seed),
        Command::Eval {
            checkpoint,
            config,
            out,
        } => commands::cmd_eval(checkpoint, config, out.as_deref()).map(|_| ()),
        Command::Gradcheck { seed, out } => commands::cmd_gradcheck(*seed, out.as_deref()),
        Command::Ablate { config, out } => commands::cmd_ablate(config, out.as_deref()),
        Command::Bench { config, out } => commands::cmd_bench(config.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
