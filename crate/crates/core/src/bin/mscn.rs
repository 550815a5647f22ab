use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mscn::cli::{self, CliError, RunConfig};

/// Meta-learned sparse compression networks.
#[derive(Parser)]
#[command(name = "mscn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set meta.lambda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train θ0, gates and MetaSGD rates; writes a checkpoint and log.
    MetaTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one signal at test time and report its sparse update.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image path or `dataset:<index>`.
        #[arg(long)]
        signal: String,
    },
    /// Fit one signal and write its compressed update.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image path or `dataset:<index>`.
        #[arg(long)]
        signal: String,
    },
    /// Rebuild a signal from a compressed update.
    Decompress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        blob: PathBuf,
        /// Reference signal for PSNR (image path or `dataset:<index>`).
        #[arg(long)]
        reference: Option<String>,
    },
    /// Baseline ladder over a λ list or a sparsity grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer sparsity and rate-distortion tables for a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(command: Command) -> Result<String, CliError> {
    let load = |c: &Common| RunConfig::load(&c.config, &c.overrides);
    match command {
        Command::MetaTrain { common } => cli::cmd_meta_train(&load(&common)?),
        Command::Fit { common, checkpoint, signal } => cli::cmd_fit(&load(&common)?, &checkpoint, &signal),
        Command::Compress { common, checkpoint, signal } => cli::cmd_compress(&load(&common)?, &checkpoint, &signal),
        Command::Decompress {
            common,
            checkpoint,
            blob,
            reference,
        } => cli::cmd_decompress(&load(&common)?, &checkpoint, &blob, reference.as_deref()),
        Command::Sweep { common } => cli::cmd_sweep(&load(&common)?),
        Command::Report { common, checkpoint } => cli::cmd_report(&load(&common)?, &checkpoint),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
