//! oadt: temporal action detection experiments from the command line.
//! Synthesize a dataset, train a detector, decode predictions, fuse model
//! outputs, and score them, all reproducible from a seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oadt_core::error::{Error, Result};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "oadt",
    version,
    about = "Train and evaluate a temporal action detector on clip-feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature + annotation bundle from a TOML spec
    Synth {
        /// Dataset spec file (TOML)
        #[arg(long)]
        spec: PathBuf,
        /// Directory to write features and annotations.json into
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's RNG seed [default: the spec's own seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Override one spec key, e.g. --set num_videos=8 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a detector on a dataset and write checkpoints + metrics
    Train {
        /// Run config file (TOML), flat keys [default: module defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// annotations.json of the training dataset
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for best.ckpt, last.ckpt, metrics.csv
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed: init, shuffling, dropout [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. --set epochs=5 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Decode detections for every video in a dataset
    Predict {
        /// Checkpoint file written by train
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// annotations.json of the dataset to decode
        #[arg(long)]
        data: Option<PathBuf>,
        /// Decode config file (TOML), flat keys [default: module defaults]
        #[arg(long = "decode-config")]
        decode_config: Option<PathBuf>,
        /// Prediction file to write (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Unused by inference; accepted for uniformity [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. --set apply_nms=false (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fuse prediction files from several models into one
    Ensemble {
        /// Per-model prediction files (two or more make a real ensemble)
        #[arg(long, num_args = 1.., value_name = "FILE")]
        predictions: Vec<PathBuf>,
        /// Fusion weights, one per file, nonnegative, sum 1 [default: uniform]
        #[arg(long, num_args = 1.., value_name = "W")]
        weights: Vec<f64>,
        /// Fused prediction file to write (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Unused by fusion; accepted for uniformity [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. --set soft_nms_sigma=0.3 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score predictions against annotations and print the mAP table
    Eval {
        /// Prediction file (JSON)
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// annotations.json with the ground truth
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Also write the report as JSON to this path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Unused by evaluation; accepted for uniformity [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. --set 'thresholds=[0.5]' (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::MissingFile { .. } => 2,
        Error::Parse(_) => 3,
        Error::Validation(_) | Error::InvalidArgument(_) | Error::ConfigMismatch { .. } => 4,
        _ => 1,
    }
}

/// Parallelism cap; every stage currently computes on one thread, which
/// always satisfies it. Kept validated so configs stay portable.
fn thread_cap() -> Result<usize> {
    match std::env::var("OADT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Validation(format!("OADT_THREADS must be a positive integer, got {v:?}"))
            }),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_cap()?;
    log::debug!("thread cap: {threads}");
    match cli.command {
        Command::Synth { spec, out, seed, set } => commands::synth(&spec, &out, seed, &set),
        Command::Train {
            config,
            data,
            out,
            seed,
            set,
        } => commands::train(config.as_deref(), data, out, seed, &set),
        Command::Predict {
            checkpoint,
            data,
            decode_config,
            out,
            seed,
            set,
        } => commands::predict(checkpoint, data, decode_config.as_deref(), out, seed, &set),
        Command::Ensemble {
            predictions,
            weights,
            out,
            seed,
            set,
        } => commands::ensemble_cmd(predictions, weights, out, seed, &set),
        Command::Eval {
            predictions,
            annotations,
            out,
            seed,
            set,
        } => commands::eval(predictions, annotations, out, seed, &set),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
