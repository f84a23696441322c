mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Region-aware contrastive training, dense-feature evaluation and
/// dataset tooling on toy encoders.
#[derive(Debug, Parser)]
#[command(name = "rsclip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset: manifest, images, masks, class list.
    SynthData(commands::SynthArgs),
    /// Build a caption manifest from COCO-style detection annotations.
    BuildDataset(commands::BuildArgs),
    /// Run one training stage.
    Train(commands::TrainArgs),
    /// Compute metrics for a checkpoint on the evaluation split.
    Eval(commands::EvalArgs),
    /// Open-vocabulary segmentation of one image.
    Segment(commands::SegmentArgs),
    /// Cosine-similarity heatmap of an anchor cell or the CLS embedding.
    Visualize(commands::VisualizeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::BuildDataset(a) => commands::build_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Segment(a) => commands::segment(a),
        Command::Visualize(a) => commands::visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
