//! One module per subcommand, plus shared plumbing.

pub mod attack;
pub mod eval;
pub mod quantize;
pub mod synthetic;
pub mod train_calibrater;
pub mod train_main;
pub mod transfer;
pub mod visualize_delta;

use std::path::{Path, PathBuf};

use anyhow::Context;
use revcal_core::data::Dataset;
use revcal_core::model::Model;
use revcal_core::model_io;

use crate::RunArgs;

/// Output directory: `--out` or a per-subcommand default.
pub fn out_dir(args: &RunArgs, subcommand: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(subcommand))
}

pub fn load_model(path: &Path) -> anyhow::Result<Model> {
    model_io::load_model(path).with_context(|| format!("cannot load model {}", path.display()))
}

/// The bits column of result rows: quantized models report their width,
/// everything else runs in full precision.
pub fn bits_label(m: &Model) -> String {
    match &m.arch().quant {
        Some(q) => q.bits.to_string(),
        None => "float".to_string(),
    }
}

pub fn require_nonempty(ds: &Dataset) -> anyhow::Result<()> {
    if ds.is_empty() {
        anyhow::bail!("dataset {} is empty", ds.id());
    }
    Ok(())
}

/// (x, y, class) triples of a 2-D dataset for plotting.
pub fn plot_points(inputs: &revcal_core::Tensor, labels: &revcal_core::Tensor) -> Vec<(f64, f64, usize)> {
    let classes = revcal_core::training::class_indices(labels);
    inputs
        .data()
        .chunks(2)
        .zip(classes)
        .map(|(xy, c)| (xy[0], xy[1], c))
        .collect()
}
