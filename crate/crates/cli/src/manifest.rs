//! Run manifests. Every subcommand records its fully expanded config, the
//! hashes of everything it read and wrote, and where the artifacts went, so
//! a run can be audited and replayed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use revcal_core::data::Dataset;
use revcal_core::hash::hash_bytes;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct ModelHashes {
    /// File hashes of models read by the run.
    pub inputs: BTreeMap<String, String>,
    /// File hashes of models written by the run.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    /// The config with every default expanded; feeding this file back as
    /// `--config` replays the run.
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub dataset_hashes: BTreeMap<String, String>,
    pub model_hashes: ModelHashes,
    /// Artifact paths relative to the output directory, in creation order.
    pub outputs: Vec<String>,
    /// Content hash of each artifact.
    pub output_hashes: BTreeMap<String, String>,
    /// Headline numbers for quick inspection.
    pub metrics: BTreeMap<String, f64>,
    pub duration_seconds: f64,
}

/// An in-progress run: output directory plus the manifest being built.
pub struct Run {
    out: PathBuf,
    started: Instant,
    manifest: Manifest,
}

impl Run {
    pub fn new(
        subcommand: &'static str,
        out: PathBuf,
        resolved_config: serde_json::Value,
        seed: u64,
        threads: usize,
    ) -> anyhow::Result<Run> {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("cannot create output directory {}", out.display()))?;
        Ok(Run {
            out,
            started: Instant::now(),
            manifest: Manifest {
                tool: "revcal",
                version: env!("CARGO_PKG_VERSION"),
                subcommand,
                resolved_config,
                seed,
                threads,
                dataset_hashes: BTreeMap::new(),
                model_hashes: ModelHashes {
                    inputs: BTreeMap::new(),
                    outputs: BTreeMap::new(),
                },
                outputs: Vec::new(),
                output_hashes: BTreeMap::new(),
                metrics: BTreeMap::new(),
                duration_seconds: 0.0,
            },
        })
    }

    /// Absolute path of an artifact named relative to the output directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn record_dataset(&mut self, label: &str, ds: &Dataset) {
        self.manifest
            .dataset_hashes
            .insert(label.to_string(), ds.content_hash());
    }

    /// Hashes a model file the run reads.
    pub fn record_input_model(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read model {}", path.display()))?;
        self.manifest
            .model_hashes
            .inputs
            .insert(label.to_string(), hash_bytes(&bytes));
        Ok(())
    }

    /// Registers an artifact the run wrote under the output directory.
    pub fn record_output(&mut self, rel: &str) {
        self.manifest.outputs.push(rel.to_string());
    }

    /// Registers a written model file and remembers its hash separately.
    pub fn record_output_model(&mut self, label: &str, rel: &str) -> anyhow::Result<()> {
        let bytes = std::fs::read(self.path(rel))?;
        self.manifest
            .model_hashes
            .outputs
            .insert(label.to_string(), hash_bytes(&bytes));
        self.record_output(rel);
        Ok(())
    }

    pub fn record_metric(&mut self, key: &str, value: f64) {
        self.manifest.metrics.insert(key.to_string(), value);
    }

    /// Hashes all registered artifacts and writes `manifest.json`.
    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        for rel in &self.manifest.outputs {
            let bytes = std::fs::read(self.out.join(rel))
                .with_context(|| format!("artifact {rel} was registered but not written"))?;
            self.manifest
                .output_hashes
                .insert(rel.clone(), hash_bytes(&bytes));
        }
        self.manifest.duration_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
