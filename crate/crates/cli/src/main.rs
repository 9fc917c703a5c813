use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "mmdemand", version, about = "Multimodal bike-share demand forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the configured subcommands.
#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, env = "MMDEMAND_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; each subcommand has its own default.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list, e.g. bike,subway,ridehail.
    #[arg(long)]
    modes: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin raw trips and counts into demand tensors.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Build and save every adjacency relation.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a data directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Saved graphs to use instead of rebuilding them.
        #[arg(long)]
        graphs: Option<PathBuf>,
    },
    /// Train several seeds and report mean and std of the test metrics.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
    },
    /// Explain bike stations of a trained checkpoint.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Bike station id, a comma list of ids, or `all` (the default).
        #[arg(long, alias = "stations", value_name = "ID|all")]
        station: Option<String>,
    },
    /// Generate a synthetic scenario with planted couplings.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Print the configuration reference.
    Schema,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<mmdemand::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
