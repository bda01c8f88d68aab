//! `pccs`: synthetic data generation, training, evaluation, ablations and reports.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage or configuration errors.

mod plot;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pccs::data::{ClassMode, Split};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pccs::PccsError),
    #[error("{0}")]
    Runtime(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(pccs::PccsError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "pccs",
    version,
    about = "Semi-supervised segmentation with boundary prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic image/mask dataset with a default split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value = "binary")]
        classes: ClassMode,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(8..=1024))]
        size: u64,
        #[arg(long, default_value_t = 0.1)]
        labeled_fraction: f64,
    },
    /// Warm-up then semi-supervised training; writes losses, checkpoints and final metrics.
    Train {
        /// JSON object or `key = value` lines overriding the named preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split manifest to use instead of `<data>/splits.csv`.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Component switch such as `l_pc=off` or `all_unsup=off`.
        #[arg(long = "toggle")]
        toggles: Vec<String>,
        /// Any other configuration override, e.g. `t_max=500` or `net.fused_dim=64`.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (for later resumption).
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// CSV destination (default: `<checkpoint>/<split>_metrics.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a toggle grid over labelled fractions and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Plots and comparison tables from run or ablation directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            classes,
            seed,
            size,
            labeled_fraction,
        } => run::gen_data(
            &out,
            n as usize,
            classes,
            seed,
            size as usize,
            labeled_fraction,
        ),
        Command::Train {
            config,
            data,
            out,
            splits,
            toggles,
            sets,
            resume,
            stop_at,
        } => run::train(run::TrainArgs {
            config,
            data,
            out,
            splits,
            overrides: toggles.into_iter().chain(sets).collect(),
            resume,
            stop_at,
        }),
        Command::Eval {
            checkpoint,
            data,
            split,
            splits,
            out,
        } => run::eval(&checkpoint, &data, split, splits.as_deref(), out.as_deref()),
        Command::Ablate {
            config,
            data,
            out,
            fractions,
            seeds,
            sets,
        } => run::ablate(config.as_deref(), &data, &out, &fractions, &seeds, &sets),
        Command::Report { runs, out } => report::report(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
