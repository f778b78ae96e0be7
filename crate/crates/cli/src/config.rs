//! Run configuration: JSON documents with every knob given a default, so a
//! manifest can replay a run without depending on anything implicit.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use revcal_core::data::{gen_circles, gen_digits, gen_ellipses, Dataset};
use revcal_core::idx::load_idx;
use revcal_core::model::{ArchSpec, Head};
use revcal_core::perturb::MergeMode;
use revcal_core::quant::QuantMethod;
use revcal_core::training::CalObjective;
use revcal_core::transform::Scenario;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a config file. A plain JSON object is taken as-is; a manifest from
/// an earlier run is recognized by its `resolved_config` key and replayed,
/// provided it belongs to the same subcommand.
pub fn load_config<T: DeserializeOwned>(path: &Path, subcommand: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let body = match doc.get("resolved_config") {
        Some(inner) => {
            if let Some(sc) = doc.get("subcommand").and_then(|v| v.as_str()) {
                if sc != subcommand {
                    bail!(
                        "{}: manifest belongs to subcommand {sc}, not {subcommand}",
                        path.display()
                    );
                }
            }
            inner.clone()
        }
        None => doc,
    };
    serde_json::from_value(body).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// Serializes a normalized config for the manifest.
pub fn resolved_value<T: Serialize>(cfg: &T) -> anyhow::Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Clamp bounds applied when perturbations merge into inputs. `null` leaves
/// inputs unclamped; JSON cannot carry infinities, so one-sided ranges are
/// not expressible here.
pub fn check_range(range: Option<(f64, f64)>) -> anyhow::Result<()> {
    if let Some((lo, hi)) = range {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            bail!("input_range must be a finite [lo, hi] pair or null");
        }
    }
    Ok(())
}

pub fn to_core_range(range: Option<(f64, f64)>) -> (f64, f64) {
    range.unwrap_or(revcal_core::perturb::UNBOUNDED)
}

/// Which half of the two-ellipse task a dataset spec selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipsePart {
    Seen,
    Hidden,
}

/// Where a dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Synthetic dot-matrix digit images, 10 classes.
    Digits { n: usize, seed: u64 },
    /// Two concentric noisy rings, 2 classes.
    Circles { n: usize, seed: u64 },
    /// Two ellipse rings with held-out arcs; `part` picks the split.
    Ellipses { n: usize, seed: u64, part: EllipsePart },
    /// IDX image/label file pair.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_idx_id")]
        id: String,
    },
    /// A dataset file written by this tool.
    File { path: PathBuf },
}

fn default_idx_id() -> String {
    "idx".to_string()
}

impl DataSpec {
    pub fn load(&self) -> anyhow::Result<Dataset> {
        let ds = match self {
            DataSpec::Digits { n, seed } => gen_digits(*n, *seed)?,
            DataSpec::Circles { n, seed } => gen_circles(*n, *seed)?,
            DataSpec::Ellipses { n, seed, part } => {
                let split = gen_ellipses(*n, *seed)?;
                match part {
                    EllipsePart::Seen => split.seen,
                    EllipsePart::Hidden => split.hidden,
                }
            }
            DataSpec::Idx { images, labels, id } => load_idx(images, labels, id.clone())?,
            DataSpec::File { path } => Dataset::load(path)
                .with_context(|| format!("cannot load dataset {}", path.display()))?,
        };
        Ok(ds)
    }
}

/// Classifier architecture choice; input shape and class count come from
/// the dataset at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchChoice {
    Linear,
    Mlp { hidden: Vec<usize> },
    Convnet {
        #[serde(default = "default_channels")]
        channels: usize,
    },
}

fn default_channels() -> usize {
    8
}

impl ArchChoice {
    pub fn to_spec(&self, input_shape: &[usize], classes: usize) -> anyhow::Result<ArchSpec> {
        let flat: usize = input_shape.iter().product();
        Ok(match self {
            ArchChoice::Linear => ArchSpec::linear(flat, classes),
            ArchChoice::Mlp { hidden } => ArchSpec::mlp(flat, hidden.clone(), classes),
            ArchChoice::Convnet { channels } => {
                let [c, h, w] = match input_shape {
                    [c, h, w] => [*c, *h, *w],
                    other => bail!("convnet needs [c, h, w] image data, got shape {other:?}"),
                };
                ArchSpec::convnet([c, h, w], *channels, classes)
            }
        })
    }
}

/// A scenario is named by one of the built-in pipelines or spelled out as a
/// full transform list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Named(String),
    Full(Scenario),
}

impl ScenarioChoice {
    pub fn named(name: &str) -> Self {
        ScenarioChoice::Named(name.to_string())
    }

    pub fn resolve(&self) -> anyhow::Result<Scenario> {
        Ok(match self {
            ScenarioChoice::Named(name) => Scenario::by_name(name)?,
            ScenarioChoice::Full(sc) => sc.clone(),
        })
    }

    /// Expands a name into the full pipeline so the manifest carries it.
    pub fn normalize(&mut self) -> anyhow::Result<Scenario> {
        let sc = self.resolve()?;
        *self = ScenarioChoice::Full(sc.clone());
        Ok(sc)
    }
}

fn d_seed() -> u64 {
    7
}

fn d_batch() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMainConfig {
    #[serde(default = "d_main_name")]
    pub name: String,
    pub data: DataSpec,
    /// Optional held-out set scored once after training.
    #[serde(default)]
    pub test: Option<DataSpec>,
    pub arch: ArchChoice,
    #[serde(default = "d_main_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_main_lr")]
    pub lr: f64,
    #[serde(default = "d_main_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_train_scenario")]
    pub scenario: ScenarioChoice,
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_main_name() -> String {
    "main".to_string()
}

fn d_main_epochs() -> usize {
    20
}

fn d_main_lr() -> f64 {
    0.005
}

fn d_main_decay() -> f64 {
    0.97
}

fn d_train_scenario() -> ScenarioChoice {
    ScenarioChoice::named("augment")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCalibraterConfig {
    #[serde(default = "d_cal_name")]
    pub name: String,
    /// Model file of the frozen classifier the calibrater serves.
    pub main: PathBuf,
    pub data: DataSpec,
    #[serde(default = "d_head")]
    pub head: Head,
    /// Parameter budget as a fraction of the main model's count.
    #[serde(default = "d_frac")]
    pub frac: f64,
    /// Explicit dense hidden widths; overrides budget-based sizing.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "d_cal_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_cal_lr")]
    pub lr: f64,
    #[serde(default = "d_cal_decay")]
    pub lr_decay: f64,
    /// Distribution shift the calibrater learns to undo.
    #[serde(default = "d_shift_scenario")]
    pub scenario: ScenarioChoice,
    #[serde(default = "d_objective")]
    pub objective: CalObjective,
    #[serde(default)]
    pub input_range: Option<(f64, f64)>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_cal_name() -> String {
    "calibrater".to_string()
}

fn d_head() -> Head {
    Head::Multiplicative
}

fn d_frac() -> f64 {
    0.1
}

fn d_cal_epochs() -> usize {
    30
}

fn d_cal_lr() -> f64 {
    0.01
}

fn d_cal_decay() -> f64 {
    0.98
}

fn d_shift_scenario() -> ScenarioChoice {
    ScenarioChoice::named("shift-strong")
}

fn d_objective() -> CalObjective {
    CalObjective::TrueProb
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub model: PathBuf,
    #[serde(default)]
    pub calibrater: Option<PathBuf>,
    pub data: DataSpec,
    #[serde(default = "d_eval_scenario")]
    pub scenario: ScenarioChoice,
    /// Flip the calibrater's delta before merging, turning the learned
    /// repair into an attack.
    #[serde(default)]
    pub negate: bool,
    #[serde(default)]
    pub input_range: Option<(f64, f64)>,
    /// Results CSV, relative to the output directory.
    #[serde(default = "d_results")]
    pub results: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_eval_scenario() -> ScenarioChoice {
    ScenarioChoice::named("identity")
}

fn d_results() -> String {
    "results.csv".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    pub model: PathBuf,
    pub bits: u8,
    #[serde(default = "d_method")]
    pub method: QuantMethod,
    /// Name of the quantized model; defaults to `<name>-q<bits>`.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_method() -> QuantMethod {
    QuantMethod::Codebook
}

/// Which way an iterative perturbation run pushes the true-class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Push the score down: manufacture misclassifications.
    Adversarial,
    /// Push the score up: repair classifications.
    Reverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCmdConfig {
    /// Model file to attack. Leave out to attack a fresh random model.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Architecture for an untrained randomly initialized target, built
    /// from the run seed when no model file is given.
    #[serde(default)]
    pub random_arch: Option<ArchChoice>,
    pub data: DataSpec,
    #[serde(default = "d_mode")]
    pub mode: MergeMode,
    #[serde(default = "d_budget")]
    pub budget: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Per-step size; defaults to 2 * budget / steps.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "d_direction")]
    pub direction: Direction,
    #[serde(default)]
    pub input_range: Option<(f64, f64)>,
    #[serde(default = "d_attack_results")]
    pub results: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_mode() -> MergeMode {
    MergeMode::Additive
}

fn d_budget() -> f64 {
    0.3
}

fn d_steps() -> usize {
    50
}

fn d_direction() -> Direction {
    Direction::Adversarial
}

fn d_attack_results() -> String {
    "attack.csv".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Frozen classifier files, row order of the grid.
    pub mains: Vec<PathBuf>,
    /// Calibrater files, column order; index i is the one trained for
    /// main i, so off-diagonal cells are cross-model transfers.
    pub calibraters: Vec<PathBuf>,
    pub data: DataSpec,
    #[serde(default = "d_shift_scenario")]
    pub scenario: ScenarioChoice,
    #[serde(default)]
    pub input_range: Option<(f64, f64)>,
    #[serde(default = "d_transfer_results")]
    pub results: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_transfer_results() -> String {
    "transfer.csv".to_string()
}

/// Self-contained 2-D demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Two concentric rings, a linear classifier that cannot separate
    /// them, and an additive calibrater that can. Negating the trained
    /// calibrater turns the repair into a near-total attack, showing the
    /// two directions are mirror images.
    Rings,
    /// Two ellipse rings whose class-defining arcs are withheld from the
    /// classifier, and a multiplicative calibrater trained only on those
    /// arcs that moves them back onto the right side of the boundary.
    Arcs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub task: SyntheticTask,
    #[serde(default = "d_synth_n")]
    pub n: usize,
    #[serde(default = "d_synth_main_epochs")]
    pub main_epochs: usize,
    #[serde(default = "d_synth_cal_epochs")]
    pub cal_epochs: usize,
    #[serde(default = "d_synth_batch")]
    pub batch: usize,
    #[serde(default = "d_synth_lr")]
    pub lr: f64,
    /// Additive head bound for the rings task.
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Calibrater hidden widths.
    #[serde(default = "d_synth_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_synth_n() -> usize {
    600
}

fn d_synth_main_epochs() -> usize {
    40
}

fn d_synth_cal_epochs() -> usize {
    60
}

fn d_synth_batch() -> usize {
    32
}

fn d_synth_lr() -> f64 {
    0.02
}

fn d_eps() -> f64 {
    3.0
}

fn d_synth_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualizeDeltaConfig {
    /// Calibrater files rendered side by side, one image set each.
    pub calibraters: Vec<PathBuf>,
    pub data: DataSpec,
    /// How many examples to render per calibrater.
    #[serde(default = "d_count")]
    pub count: usize,
    /// Shift applied to the inputs before the calibrater sees them.
    #[serde(default = "d_eval_scenario")]
    pub scenario: ScenarioChoice,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
}

fn d_count() -> usize {
    4
}
