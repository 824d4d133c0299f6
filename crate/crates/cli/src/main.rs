//! `sprt`: generate toy data, train the prior, invert subjects, reenact and
//! evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sprt_core::Error;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sprt", version, about = "Gaussian head avatars from a synthetic prior")]
struct Cli {
    /// TOML configuration; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. 1 runs everything sequentially and deterministically.
    #[arg(long, global = true, env = "SPRT_THREADS")]
    threads: Option<usize>,

    /// Overrides the dataset, training and initialization seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the procedural toy dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prior on a generated dataset.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; without a path, the newest one in `--out`.
        #[arg(long)]
        resume: Option<Option<PathBuf>>,
    },
    /// Fit the prior to a few images of one subject.
    Invert {
        /// Trained prior (`prior.bin` or any training checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input manifest JSON.
        #[arg(long)]
        inputs: PathBuf,
        /// Number of manifest entries to use, taken from the front.
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a personalized model with an expression and pose sequence.
    Reenact {
        #[arg(long)]
        personalized: PathBuf,
        /// JSON list of `{gamma, pose}` frames.
        #[arg(long)]
        driving: PathBuf,
        /// JSON list of cameras; frame `i` uses camera `i % len`.
        #[arg(long)]
        camera_path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a personalized model against dataset frames of its subject.
    Eval {
        #[arg(long)]
        personalized: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Dataset identity the model was inverted from.
        #[arg(long, default_value_t = 0)]
        identity: usize,
        /// Per-frame metrics CSV; a `_summary.csv` is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> sprt_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        sprt_core::exec::configure_threads(n);
    }
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, &out),
        Command::TrainPrior { data, out, resume } => commands::train_prior(&cfg, &data, &out, resume),
        Command::Invert {
            checkpoint,
            inputs,
            views,
            out,
        } => commands::invert(&cfg, &checkpoint, &inputs, views, &out),
        Command::Reenact {
            personalized,
            driving,
            camera_path,
            out,
        } => commands::reenact(&cfg, &personalized, &driving, &camera_path, &out),
        Command::Eval {
            personalized,
            data,
            split,
            identity,
            out,
        } => commands::eval(&cfg, &personalized, &data, split, identity, &out),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
