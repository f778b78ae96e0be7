//! `revcal`: train, break, repair, quantize, and plot small classifiers
//! whose inputs pass through learned benign perturbations.
//!
//! Every subcommand reads one JSON config, writes its artifacts into an
//! output directory, and leaves a manifest that can replay the run.
//!
//! Exit codes: 0 success, 1 bad config or arguments, 2 file or format
//! trouble, 3 numerical failure.

mod cmds;
mod config;
mod csvout;
mod manifest;
mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "revcal", version, about = "classifier calibration experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args)]
pub struct RunArgs {
    /// JSON config for the run, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's worker count; 1 forces the fully serial path.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (default runs/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a classifier and save it frozen.
    TrainMain(RunArgs),
    /// Train a perturbation generator against a frozen classifier.
    TrainCalibrater(RunArgs),
    /// Score a model (optionally through a calibrater) and append a CSV row.
    Eval(RunArgs),
    /// Reduce a model's weights to k bits per layer.
    Quantize(RunArgs),
    /// Run an iterative perturbation over a test set, in either direction.
    Attack(RunArgs),
    /// Cross several mains with several calibraters on shifted data.
    Transfer(RunArgs),
    /// Self-contained 2-D demonstrations with plots.
    Synthetic(RunArgs),
    /// Render calibrater perturbations as grayscale images.
    VisualizeDelta(RunArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::TrainMain(a) => cmds::train_main::run(a),
        Cmd::TrainCalibrater(a) => cmds::train_calibrater::run(a),
        Cmd::Eval(a) => cmds::eval::run(a),
        Cmd::Quantize(a) => cmds::quantize::run(a),
        Cmd::Attack(a) => cmds::attack::run(a),
        Cmd::Transfer(a) => cmds::transfer::run(a),
        Cmd::Synthetic(a) => cmds::synthetic::run(a),
        Cmd::VisualizeDelta(a) => cmds::visualize_delta::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if let Some(core) = e.downcast_ref::<revcal_core::Error>() {
        match core {
            revcal_core::Error::NonFinite(_) => 3,
            revcal_core::Error::Io(_) | revcal_core::Error::Format(_) => 2,
            _ => 1,
        }
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        2
    } else {
        1
    }
}
