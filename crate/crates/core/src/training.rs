//! Classifier and calibrater training, the shared loss builders, and
//! batched evaluation with deterministic block sharding.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{ForwardPass, Model};
use crate::perturb::{merge, merge_on_graph, negate_delta};
use crate::transform::{scenario_apply, Scenario};
use crate::{Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Checks that `labels` is a `[n, classes]` matrix whose entries are exactly
/// 0.0 or 1.0 with a single 1 per row.
pub fn check_one_hot(labels: &Tensor) -> Result<()> {
    if labels.rank() != 2 {
        return Err(Error::invalid(format!(
            "labels must be a [n, classes] one-hot matrix, got rank {}",
            labels.rank()
        )));
    }
    let k = labels.shape()[1];
    for (i, row) in labels.data().chunks(k).enumerate() {
        let mut ones = 0usize;
        for v in row {
            if *v == 1.0 {
                ones += 1;
            } else if *v != 0.0 {
                return Err(Error::invalid(format!(
                    "label row {i} holds {v}, one-hot entries must be 0 or 1"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::invalid(format!(
                "label row {i} has {ones} ones, expected exactly one"
            )));
        }
    }
    Ok(())
}

/// Class index of each one-hot row. Assumes `check_one_hot` passed.
pub fn class_indices(labels: &Tensor) -> Vec<usize> {
    let k = labels.shape()[1];
    labels
        .data()
        .chunks(k)
        .map(|row| row.iter().position(|v| *v == 1.0).unwrap_or(0))
        .collect()
}

/// Mean cross-entropy between classifier `logits` and one-hot `labels`,
/// both graph nodes of shape `[n, classes]`.
///
/// The log is taken on `softmax * y + (1 - y)`, which is the true-class
/// probability at labeled slots and exactly 1 elsewhere. That keeps every
/// log argument positive without masking ops, and contributes zero loss and
/// zero gradient at the unlabeled slots. A floor of 1e-12 guards against
/// a fully collapsed softmax.
pub fn cross_entropy_graph(g: &mut Graph, logits: NodeId, labels: NodeId) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape != g.value(labels).shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: g.value(labels).shape().to_vec(),
        });
    }
    let n = shape[0] as f64;
    let sm = g.softmax(logits, 1)?;
    let picked = g.mul(sm, labels)?;
    let off = g.affine(labels, -1.0, 1.0)?;
    let mixed = g.add(picked, off)?;
    let safe = g.clamp(mixed, 1e-12, f64::INFINITY)?;
    let logs = g.ln(safe)?;
    let total = g.sum(logs)?;
    g.affine(total, -1.0 / n, 0.0)
}

/// Calibrater objective: one minus the mean true-class softmax probability.
/// Untrained calibraters leave inputs alone, so this starts at the frozen
/// model's own confidence and training pushes it down from there.
pub fn true_prob_loss_graph(g: &mut Graph, logits: NodeId, labels: NodeId) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape != g.value(labels).shape() {
        return Err(Error::ShapeMismatch {
            op: "true_prob_loss",
            lhs: shape,
            rhs: g.value(labels).shape().to_vec(),
        });
    }
    let n = shape[0] as f64;
    let sm = g.softmax(logits, 1)?;
    let picked = g.mul(sm, labels)?;
    let total = g.sum(picked)?;
    g.affine(total, -1.0 / n, 1.0)
}

/// Mean true-class probability taken from an already evaluated softmax node.
pub fn mean_true_prob_from(g: &Graph, softmax: NodeId, labels: &Tensor) -> f64 {
    let probs = g.value(softmax);
    let k = probs.shape()[1];
    let idx = class_indices(labels);
    let total: f64 = idx
        .iter()
        .enumerate()
        .map(|(i, c)| probs.data()[i * k + c])
        .sum();
    total / idx.len() as f64
}

/// Deterministic seed derivation, splitmix64 over the combined words.
/// Keeps shuffling, augmentation, and evaluation draws independent.
fn mix(seed: u64, tag: u64, idx: u64) -> u64 {
    let mut z = seed
        ^ tag.rotate_left(32)
        ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_BLOCK: u64 = 3;

/// First-axis gather into a new tensor.
fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(shape, data).expect("gather preserves element counts")
}

/// First-axis contiguous slice `[lo, hi)`.
fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::from_vec(shape, t.data()[lo * stride..hi * stride].to_vec())
        .expect("slice preserves element counts")
}

/// Predictions and summed true-class probability for one batch.
fn predict_batch(model: &Model, x: &Tensor, labels: &Tensor) -> Result<(Vec<usize>, f64)> {
    let mut g = Graph::new();
    let xl = g.leaf(x.clone())?;
    let pass = model.forward(&mut g, xl)?;
    let sm = g.softmax(pass.output, 1)?;
    let prob_sum = mean_true_prob_from(&g, sm, labels) * labels.shape()[0] as f64;
    let logits = g.value(pass.output);
    let k = logits.shape()[1];
    let preds = logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                    if *v > bv {
                        (i, *v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();
    Ok((preds, prob_sum))
}

fn accuracy_chunked(model: &Model, inputs: &Tensor, labels: &Tensor) -> Result<f64> {
    let n = inputs.shape()[0];
    let truth = class_indices(labels);
    let mut correct = 0usize;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + EVAL_BLOCK).min(n);
        let preds = model.classify(&slice_rows(inputs, lo, hi))?;
        correct += preds
            .iter()
            .zip(&truth[lo..hi])
            .filter(|(p, t)| p == t)
            .count();
        lo = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// One epoch's worth of progress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Classifier fits report clean training accuracy; calibrater runs
    /// report the frozen model's accuracy on calibrated shifted inputs.
    pub accuracy: f64,
}

/// Settings for [`fit_classifier`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplicative per-epoch learning rate decay; 1.0 keeps it flat.
    pub lr_decay: f64,
    /// Augmentation pipeline, redrawn every epoch.
    pub scenario: Scenario,
    pub seed: u64,
    /// Stop once clean training accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl FitConfig {
    fn check(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!("bad learning rate {}", self.lr)));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::invalid(format!("bad lr decay {}", self.lr_decay)));
        }
        Ok(())
    }
}

/// Trains a classifier by minibatch cross-entropy descent. Augmentation,
/// shuffling, and therefore the final weights are fully determined by the
/// config seed.
pub fn fit_classifier(model: &mut Model, data: &Dataset, cfg: &FitConfig) -> Result<Vec<EpochLog>> {
    cfg.check()?;
    if model.frozen() {
        return Err(Error::invalid(format!(
            "model {} is frozen and cannot be trained",
            model.name()
        )));
    }
    if model.arch().classes != data.classes() {
        return Err(Error::invalid(format!(
            "model {} has {} classes, dataset {} has {}",
            model.name(),
            model.arch().classes,
            data.id(),
            data.classes()
        )));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr * cfg.lr_decay.powi(epoch as i32));
        let shifted = scenario_apply(
            &cfg.scenario,
            data.inputs(),
            mix(cfg.seed, TAG_AUGMENT, epoch as u64),
        )?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix(
            cfg.seed,
            TAG_SHUFFLE,
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let x = gather_rows(&shifted, chunk);
            let y = gather_rows(data.labels(), chunk);
            let mut g = Graph::new();
            let xl = g.leaf(x)?;
            let yl = g.leaf(y)?;
            let pass = model.forward(&mut g, xl)?;
            let loss = cross_entropy_graph(&mut g, pass.output, yl)?;
            g.backward(loss)?;
            model.collect_grads(&g, &pass)?;
            opt.step(model.params_mut())?;
            loss_sum += g.value(loss).item()? * chunk.len() as f64;
        }
        let accuracy = accuracy_chunked(model, data.inputs(), data.labels())?;
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr: opt.lr(),
            accuracy,
        });
        if cfg.stop_at_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    Ok(log)
}

/// Which loss drives calibrater training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalObjective {
    /// One minus the mean true-class probability.
    TrueProb,
    /// Plain cross-entropy.
    CrossEntropy,
}

/// Builds the full calibration loss on one graph: run the calibrater, merge
/// its delta into the inputs, score with the frozen main model. Returns the
/// loss node and the calibrater's parameter bindings.
pub fn calibrater_loss_graph(
    g: &mut Graph,
    cal: &Model,
    main: &Model,
    x: &Tensor,
    labels: &Tensor,
    objective: CalObjective,
    input_range: (f64, f64),
) -> Result<(NodeId, ForwardPass)> {
    let head = cal.arch().head.ok_or_else(|| {
        Error::invalid(format!("model {} has no perturbation head", cal.name()))
    })?;
    let xl = g.leaf(x.clone())?;
    let yl = g.leaf(labels.clone())?;
    let cal_pass = cal.forward(g, xl)?;
    let merged = merge_on_graph(g, xl, cal_pass.output, head.merge_mode(), input_range)?;
    let main_pass = main.forward(g, merged)?;
    let loss = match objective {
        CalObjective::TrueProb => true_prob_loss_graph(g, main_pass.output, yl)?,
        CalObjective::CrossEntropy => cross_entropy_graph(g, main_pass.output, yl)?,
    };
    Ok((loss, cal_pass))
}

/// Settings for [`train_calibrater`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Distribution shift the calibrater learns to undo, redrawn per epoch.
    pub scenario: Scenario,
    pub seed: u64,
    pub input_range: (f64, f64),
    pub objective: CalObjective,
}

/// Trains a calibrater against a frozen classifier: shift the inputs, let
/// the calibrater emit a delta, merge, and push the frozen model's
/// true-class score up. Only calibrater weights move; the main model is
/// hash-checked every epoch to prove it.
pub fn train_calibrater(
    cal: &mut Model,
    main: &Model,
    data: &Dataset,
    cfg: &CalTrainConfig,
) -> Result<Vec<EpochLog>> {
    FitConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        lr_decay: cfg.lr_decay,
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        stop_at_accuracy: None,
    }
    .check()?;
    if !main.frozen() {
        return Err(Error::NotFrozen(main.name().to_string()));
    }
    if cal.frozen() {
        return Err(Error::invalid(format!(
            "calibrater {} is frozen and cannot be trained",
            cal.name()
        )));
    }
    if main.arch().classes != data.classes() {
        return Err(Error::invalid(format!(
            "model {} has {} classes, dataset {} has {}",
            main.name(),
            main.arch().classes,
            data.id(),
            data.classes()
        )));
    }
    let main_hash = main.param_hash();
    let head = cal.arch().head.ok_or_else(|| {
        Error::invalid(format!("model {} has no perturbation head", cal.name()))
    })?;
    let mode = head.merge_mode();

    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if main.param_hash() != main_hash {
            return Err(Error::invalid(format!(
                "frozen model {} changed during calibration",
                main.name()
            )));
        }
        opt.set_lr(cfg.lr * cfg.lr_decay.powi(epoch as i32));
        let shifted = scenario_apply(
            &cfg.scenario,
            data.inputs(),
            mix(cfg.seed, TAG_AUGMENT, epoch as u64),
        )?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix(
            cfg.seed,
            TAG_SHUFFLE,
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let x = gather_rows(&shifted, chunk);
            let y = gather_rows(data.labels(), chunk);
            let mut g = Graph::new();
            let (loss, cal_pass) =
                calibrater_loss_graph(&mut g, cal, main, &x, &y, cfg.objective, cfg.input_range)?;
            g.backward(loss)?;
            cal.collect_grads(&g, &cal_pass)?;
            opt.step(cal.params_mut())?;
            loss_sum += g.value(loss).item()? * chunk.len() as f64;
        }

        // Accuracy of the frozen model on calibrated shifted inputs.
        let mut correct = 0usize;
        let truth = class_indices(data.labels());
        let mut lo = 0;
        while lo < data.len() {
            let hi = (lo + EVAL_BLOCK).min(data.len());
            let xs = slice_rows(&shifted, lo, hi);
            let delta = cal.output(&xs)?;
            let merged = merge(&xs, &delta, mode, cfg.input_range)?;
            let preds = main.classify(&merged)?;
            correct += preds
                .iter()
                .zip(&truth[lo..hi])
                .filter(|(p, t)| p == t)
                .count();
            lo = hi;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr: opt.lr(),
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(log)
}

/// Examples per evaluation block. Scenario draws are seeded per block, so
/// results are identical for any worker count.
pub const EVAL_BLOCK: usize = 256;

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Shift applied to the inputs before any calibration.
    pub scenario: Scenario,
    pub seed: u64,
    pub input_range: (f64, f64),
    /// Flip the calibrater's delta before merging: negate additive deltas,
    /// invert multiplicative ones.
    pub negate: bool,
    /// Worker threads; 0 picks the machine's available parallelism.
    pub threads: usize,
}

/// Accuracy of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: usize,
    pub n: usize,
    pub correct: usize,
}

/// Evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_true_prob: f64,
    pub per_class: Vec<ClassStat>,
}

/// Scores `main` on `data`, optionally shifting every block's inputs by the
/// scenario and repairing them with a calibrater first.
///
/// Work is cut into fixed blocks of [`EVAL_BLOCK`] examples. Each block's
/// scenario draws come from a seed mixed with the block index, and block
/// results are reduced in block order, so the report is bit-identical no
/// matter how many threads run.
pub fn evaluate(
    main: &Model,
    cal: Option<&Model>,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if main.arch().classes != data.classes() {
        return Err(Error::invalid(format!(
            "model {} has {} classes, dataset {} has {}",
            main.name(),
            main.arch().classes,
            data.id(),
            data.classes()
        )));
    }
    let mode = match cal {
        Some(c) => Some(
            c.arch()
                .head
                .ok_or_else(|| {
                    Error::invalid(format!("model {} has no perturbation head", c.name()))
                })?
                .merge_mode(),
        ),
        None => None,
    };

    let n = data.len();
    let blocks = n.div_ceil(EVAL_BLOCK);
    let truth = class_indices(data.labels());

    struct BlockOut {
        correct_by_class: Vec<usize>,
        n_by_class: Vec<usize>,
        prob_sum: f64,
    }
    let run_block = |b: usize| -> Result<BlockOut> {
        let lo = b * EVAL_BLOCK;
        let hi = ((b + 1) * EVAL_BLOCK).min(n);
        let xs = slice_rows(data.inputs(), lo, hi);
        let ys = slice_rows(data.labels(), lo, hi);
        let shifted = scenario_apply(&cfg.scenario, &xs, mix(cfg.seed, TAG_BLOCK, b as u64))?;
        let merged = match (cal, mode) {
            (Some(c), Some(m)) => {
                let mut delta = c.output(&shifted)?;
                if cfg.negate {
                    delta = negate_delta(&delta, m)?;
                }
                merge(&shifted, &delta, m, cfg.input_range)?
            }
            _ => shifted,
        };
        let (preds, prob_sum) = predict_batch(main, &merged, &ys)?;
        let k = data.classes();
        let mut out = BlockOut {
            correct_by_class: vec![0; k],
            n_by_class: vec![0; k],
            prob_sum,
        };
        for (i, p) in preds.iter().enumerate() {
            let t = truth[lo + i];
            out.n_by_class[t] += 1;
            if *p == t {
                out.correct_by_class[t] += 1;
            }
        }
        Ok(out)
    };

    let workers = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |p| p.get())
    } else {
        cfg.threads
    }
    .min(blocks.max(1));

    let mut outs: Vec<Option<Result<BlockOut>>> = Vec::with_capacity(blocks);
    outs.resize_with(blocks, || None);
    if workers <= 1 {
        for (b, slot) in outs.iter_mut().enumerate() {
            *slot = Some(run_block(b));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut outs);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let b = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if b >= blocks {
                        break;
                    }
                    let out = run_block(b);
                    slots.lock().expect("no poisoned block writers")[b] = Some(out);
                });
            }
        });
    }

    let k = data.classes();
    let mut per_class: Vec<ClassStat> = (0..k)
        .map(|class| ClassStat {
            class,
            n: 0,
            correct: 0,
        })
        .collect();
    let mut prob_total = 0.0;
    for out in outs {
        let out = out.expect("every block ran")?;
        for c in 0..k {
            per_class[c].n += out.n_by_class[c];
            per_class[c].correct += out.correct_by_class[c];
        }
        prob_total += out.prob_sum;
    }
    let correct: usize = per_class.iter().map(|s| s.correct).sum();
    Ok(EvalReport {
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        mean_true_prob: prob_total / n as f64,
        per_class,
    })
}

/// Accuracy grid of several frozen classifiers crossed with several
/// calibraters on the same shifted data: one baseline column without any
/// calibrater, then one column per calibrater.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub mains: Vec<String>,
    pub cals: Vec<String>,
    /// Baseline accuracy per main model, no calibrater.
    pub baseline: Vec<f64>,
    /// `cells[i][j]`: accuracy of main `i` with calibrater `j`.
    pub cells: Vec<Vec<f64>>,
}

pub fn transfer_matrix(
    mains: &[&Model],
    cals: &[&Model],
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<TransferReport> {
    if mains.is_empty() {
        return Err(Error::invalid("transfer needs at least one main model"));
    }
    let mut baseline = Vec::with_capacity(mains.len());
    let mut cells = Vec::with_capacity(mains.len());
    for m in mains {
        baseline.push(evaluate(m, None, data, cfg)?.accuracy);
        let mut row = Vec::with_capacity(cals.len());
        for c in cals {
            row.push(evaluate(m, Some(c), data, cfg)?.accuracy);
        }
        cells.push(row);
    }
    Ok(TransferReport {
        mains: mains.iter().map(|m| m.name().to_string()).collect(),
        cals: cals.iter().map(|c| c.name().to_string()).collect(),
        baseline,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_circles, gen_digits, gen_ellipses};
    use crate::gradcheck::grad_check;
    use crate::model::{build_model, ArchSpec, Head};
    use crate::perturb::UNBOUNDED;
    use rand::{Rng, SeedableRng};

    fn labels_of(rows: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * k];
        for (i, c) in rows.iter().enumerate() {
            data[i * k + c] = 1.0;
        }
        Tensor::from_vec(vec![rows.len(), k], data).unwrap()
    }

    #[test]
    fn one_hot_check_accepts_and_rejects() {
        assert!(check_one_hot(&labels_of(&[0, 2, 1], 3)).is_ok());
        let two_ones = Tensor::from_vec(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(check_one_hot(&two_ones).is_err());
        let soft = Tensor::from_vec(vec![1, 3], vec![0.9, 0.1, 0.0]).unwrap();
        assert!(check_one_hot(&soft).is_err());
        let flat = Tensor::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(check_one_hot(&flat).is_err());
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        // Uniform logits over k classes give loss ln(k).
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[2, 4])).unwrap();
        let y = g.leaf(labels_of(&[1, 3], 4)).unwrap();
        let loss = cross_entropy_graph(&mut g, z, y).unwrap();
        assert!((g.value(loss).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        // Hand case: logits [2, 0], true class 0.
        let mut g = Graph::new();
        let z = g
            .leaf(Tensor::from_vec(vec![1, 2], vec![2.0, 0.0]).unwrap())
            .unwrap();
        let y = g.leaf(labels_of(&[0], 2)).unwrap();
        let loss = cross_entropy_graph(&mut g, z, y).unwrap();
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let labels = labels_of(&[2, 0], 3);
        let point = Tensor::from_vec(vec![2, 3], vec![0.3, -1.2, 0.8, 0.1, 0.0, -0.4])
            .unwrap()
            .with_grad();
        let rep = grad_check(
            |g, z| {
                let y = g.leaf(labels.clone())?;
                cross_entropy_graph(g, z, y)
            },
            &point,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_err);
    }

    #[test]
    fn true_prob_loss_is_one_minus_mean_confidence() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[3, 5])).unwrap();
        let y = g.leaf(labels_of(&[0, 4, 2], 5)).unwrap();
        let loss = true_prob_loss_graph(&mut g, z, y).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn true_prob_loss_gradient_matches_finite_differences() {
        let labels = labels_of(&[1, 1], 3);
        let point = Tensor::from_vec(vec![2, 3], vec![0.5, -0.2, 1.1, -0.9, 0.3, 0.0])
            .unwrap()
            .with_grad();
        let rep = grad_check(
            |g, z| {
                let y = g.leaf(labels.clone())?;
                true_prob_loss_graph(g, z, y)
            },
            &point,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_err);
    }

    #[test]
    fn mean_true_prob_reads_softmax_values() {
        let mut g = Graph::new();
        let z = g
            .leaf(Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 5.0, -5.0]).unwrap())
            .unwrap();
        let sm = g.softmax(z, 1).unwrap();
        let labels = labels_of(&[0, 0], 2);
        let p = mean_true_prob_from(&g, sm, &labels);
        let expect = (0.5 + 1.0 / (1.0 + (-10.0f64).exp())) / 2.0;
        assert!((p - expect).abs() < 1e-12);
    }

    #[test]
    fn classifier_fit_learns_concentric_circles() {
        let data = gen_circles(256, 5).unwrap();
        let mut m = build_model("m", &ArchSpec::mlp(2, vec![16], 2), 1).unwrap();
        let cfg = FitConfig {
            epochs: 60,
            batch: 32,
            lr: 0.02,
            lr_decay: 0.98,
            scenario: Scenario::identity(),
            seed: 7,
            stop_at_accuracy: Some(0.97),
        };
        let log = fit_classifier(&mut m, &data, &cfg).unwrap();
        let last = log.last().unwrap();
        assert!(
            last.accuracy >= 0.95,
            "rings should separate, got {}",
            last.accuracy
        );
        assert!(last.mean_loss < log[0].mean_loss);
    }

    #[test]
    fn classifier_fit_is_seed_deterministic() {
        let data = gen_circles(64, 2).unwrap();
        let cfg = FitConfig {
            epochs: 3,
            batch: 16,
            lr: 0.01,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: 11,
            stop_at_accuracy: None,
        };
        let mut a = build_model("a", &ArchSpec::mlp(2, vec![8], 2), 4).unwrap();
        fit_classifier(&mut a, &data, &cfg).unwrap();
        let mut b = build_model("b", &ArchSpec::mlp(2, vec![8], 2), 4).unwrap();
        fit_classifier(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn fit_rejects_frozen_models_and_class_mismatch() {
        let data = gen_circles(16, 1).unwrap();
        let cfg = FitConfig {
            epochs: 1,
            batch: 8,
            lr: 0.01,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: 0,
            stop_at_accuracy: None,
        };
        let mut frozen = build_model("f", &ArchSpec::linear(2, 2), 0).unwrap();
        frozen.freeze();
        assert!(fit_classifier(&mut frozen, &data, &cfg).is_err());
        let mut wrong = build_model("w", &ArchSpec::linear(2, 3), 0).unwrap();
        assert!(fit_classifier(&mut wrong, &data, &cfg).is_err());
    }

    #[test]
    fn calibration_loss_gradients_match_finite_differences() {
        let mut main = build_model("main", &ArchSpec::linear(2, 2), 3).unwrap();
        main.params_mut()["fc.w"]
            .data_mut()
            .copy_from_slice(&[1.2, -0.4, 0.3, 0.9]);
        main.freeze();
        let mut cal = build_model(
            "cal",
            &ArchSpec::calibrater_dense(2, vec![4], Head::Multiplicative),
            5,
        )
        .unwrap();
        // Scramble so the zero-initialized output layer does not zero out
        // every upstream gradient.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for p in cal.params_mut().values_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = Tensor::from_vec(vec![3, 2], vec![0.8, 1.4, 2.0, 0.5, 1.1, 1.9]).unwrap();
        let y = labels_of(&[0, 1, 0], 2);

        for objective in [CalObjective::TrueProb, CalObjective::CrossEntropy] {
            let mut g = Graph::new();
            let (loss, pass) =
                calibrater_loss_graph(&mut g, &cal, &main, &x, &y, objective, (0.0, 4.0)).unwrap();
            g.backward(loss).unwrap();
            cal.collect_grads(&g, &pass).unwrap();

            let h = 1e-5;
            let mut checked = 0;
            let names: Vec<String> = cal.params().keys().cloned().collect();
            for name in names {
                let numel = cal.params()[&name].numel();
                for j in [0, numel / 2, numel - 1] {
                    let analytic = cal.params()[&name].grad().unwrap()[j];
                    let probe = |v: f64| -> f64 {
                        let mut c2 = cal.clone();
                        c2.params_mut()[&name].data_mut()[j] = v;
                        let mut g = Graph::new();
                        let (l, _) = calibrater_loss_graph(
                            &mut g, &c2, &main, &x, &y, objective, (0.0, 4.0),
                        )
                        .unwrap();
                        g.value(l).item().unwrap()
                    };
                    let base = cal.params()[&name].data()[j];
                    let numeric = (probe(base + h) - probe(base - h)) / (2.0 * h);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-4,
                        "{objective:?} {name}[{j}]: analytic {analytic}, numeric {numeric}"
                    );
                    checked += 1;
                }
            }
            assert!(checked >= 12);
        }
    }

    #[test]
    fn calibrater_repairs_a_held_out_arc() {
        // The main model only ever sees the arcs on each ring's own side,
        // so the hidden arcs land on the wrong side of its boundary. The
        // calibrater, trained only on hidden points against the frozen
        // model, has to learn to push them back across.
        let train = gen_ellipses(400, 1).unwrap();
        let test = gen_ellipses(400, 2).unwrap();
        let mut main = build_model("main", &ArchSpec::mlp(2, vec![8], 2), 3).unwrap();
        fit_classifier(
            &mut main,
            &train.seen,
            &FitConfig {
                epochs: 40,
                batch: 32,
                lr: 0.02,
                lr_decay: 1.0,
                scenario: Scenario::identity(),
                seed: 5,
                stop_at_accuracy: Some(0.98),
            },
        )
        .unwrap();
        main.freeze();

        let ecfg = EvalConfig {
            scenario: Scenario::identity(),
            seed: 0,
            input_range: UNBOUNDED,
            negate: false,
            threads: 1,
        };
        let seen_acc = evaluate(&main, None, &test.seen, &ecfg).unwrap().accuracy;
        let hidden_before = evaluate(&main, None, &test.hidden, &ecfg).unwrap().accuracy;
        assert!(seen_acc > 0.9, "seen arcs learnable, got {seen_acc}");
        assert!(
            hidden_before < 0.3,
            "hidden arcs sit on the wrong side, got {hidden_before}"
        );

        let mut cal = build_model(
            "cal",
            &ArchSpec::calibrater_dense(2, vec![16], Head::Multiplicative),
            7,
        )
        .unwrap();
        train_calibrater(
            &mut cal,
            &main,
            &train.hidden,
            &CalTrainConfig {
                epochs: 40,
                batch: 32,
                lr: 0.02,
                lr_decay: 1.0,
                scenario: Scenario::identity(),
                seed: 9,
                input_range: (0.0, f64::INFINITY),
                objective: CalObjective::TrueProb,
            },
        )
        .unwrap();
        cal.freeze();
        let mut ecal = ecfg.clone();
        ecal.input_range = (0.0, f64::INFINITY);
        let hidden_after = evaluate(&main, Some(&cal), &test.hidden, &ecal)
            .unwrap()
            .accuracy;
        assert!(
            hidden_after > hidden_before + 0.4,
            "calibration should repair the arc: {hidden_before} -> {hidden_after}"
        );
    }

    #[test]
    fn zero_epoch_calibration_changes_nothing() {
        let mut main = build_model("main", &ArchSpec::linear(2, 2), 0).unwrap();
        main.freeze();
        let mut cal = build_model(
            "cal",
            &ArchSpec::calibrater_dense(2, vec![4], Head::Additive { eps: 0.1 }),
            1,
        )
        .unwrap();
        let before = cal.param_hash();
        let data = gen_circles(32, 3).unwrap();
        let log = train_calibrater(
            &mut cal,
            &main,
            &data,
            &CalTrainConfig {
                epochs: 0,
                batch: 8,
                lr: 0.01,
                lr_decay: 1.0,
                scenario: Scenario::identity(),
                seed: 0,
                input_range: UNBOUNDED,
                objective: CalObjective::TrueProb,
            },
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(cal.param_hash(), before);
    }

    #[test]
    fn calibration_requires_frozen_main() {
        let main = build_model("main", &ArchSpec::linear(2, 2), 0).unwrap();
        let mut cal = build_model(
            "cal",
            &ArchSpec::calibrater_dense(2, vec![4], Head::Multiplicative),
            1,
        )
        .unwrap();
        let data = gen_circles(16, 0).unwrap();
        let err = train_calibrater(
            &mut cal,
            &main,
            &data,
            &CalTrainConfig {
                epochs: 1,
                batch: 8,
                lr: 0.01,
                lr_decay: 1.0,
                scenario: Scenario::identity(),
                seed: 0,
                input_range: UNBOUNDED,
                objective: CalObjective::TrueProb,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotFrozen(_)));
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let data = gen_digits(600, 4).unwrap();
        let m = build_model("m", &ArchSpec::mlp(784, vec![16], 10), 2).unwrap();
        let run = |threads: usize| {
            evaluate(
                &m,
                None,
                &data,
                &EvalConfig {
                    scenario: Scenario::shift_mild(),
                    seed: 31,
                    input_range: (0.0, 1.0),
                    negate: false,
                    threads,
                },
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(4);
        let c = run(0);
        assert_eq!(a.correct, b.correct);
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.mean_true_prob.to_bits(), b.mean_true_prob.to_bits());
        assert_eq!(a.correct, c.correct);
        for (sa, sb) in a.per_class.iter().zip(&b.per_class) {
            assert_eq!(sa.n, sb.n);
            assert_eq!(sa.correct, sb.correct);
        }
    }

    #[test]
    fn untrained_calibrater_does_not_move_evaluation() {
        let data = gen_circles(100, 8).unwrap();
        let mut m = build_model("m", &ArchSpec::mlp(2, vec![8], 2), 1).unwrap();
        m.freeze();
        let cal = build_model(
            "cal",
            &ArchSpec::calibrater_dense(2, vec![8], Head::Multiplicative),
            2,
        )
        .unwrap();
        let cfg = EvalConfig {
            scenario: Scenario::identity(),
            seed: 0,
            input_range: UNBOUNDED,
            negate: false,
            threads: 1,
        };
        let plain = evaluate(&m, None, &data, &cfg).unwrap();
        let with_cal = evaluate(&m, Some(&cal), &data, &cfg).unwrap();
        assert_eq!(plain.correct, with_cal.correct);
        assert_eq!(
            plain.mean_true_prob.to_bits(),
            with_cal.mean_true_prob.to_bits()
        );
        let negated = evaluate(
            &m,
            Some(&cal),
            &data,
            &EvalConfig {
                negate: true,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(plain.correct, negated.correct);
    }

    #[test]
    fn evaluation_rejects_class_mismatch() {
        let data = gen_circles(16, 0).unwrap();
        let m = build_model("m", &ArchSpec::linear(2, 3), 0).unwrap();
        assert!(evaluate(
            &m,
            None,
            &data,
            &EvalConfig {
                scenario: Scenario::identity(),
                seed: 0,
                input_range: UNBOUNDED,
                negate: false,
                threads: 1,
            }
        )
        .is_err());
    }

    #[test]
    fn transfer_grid_matches_individual_evaluations() {
        let data = gen_circles(64, 6).unwrap();
        let mut m1 = build_model("m1", &ArchSpec::mlp(2, vec![8], 2), 1).unwrap();
        m1.freeze();
        let mut m2 = build_model("m2", &ArchSpec::linear(2, 2), 2).unwrap();
        m2.freeze();
        let c1 = build_model(
            "c1",
            &ArchSpec::calibrater_dense(2, vec![4], Head::Multiplicative),
            3,
        )
        .unwrap();
        let cfg = EvalConfig {
            scenario: Scenario::identity(),
            seed: 5,
            input_range: UNBOUNDED,
            negate: false,
            threads: 2,
        };
        let rep = transfer_matrix(&[&m1, &m2], &[&c1], &data, &cfg).unwrap();
        assert_eq!(rep.mains, vec!["m1", "m2"]);
        assert_eq!(rep.cals, vec!["c1"]);
        assert_eq!(rep.cells.len(), 2);
        let direct = evaluate(&m2, None, &data, &cfg).unwrap().accuracy;
        assert_eq!(rep.baseline[1].to_bits(), direct.to_bits());
        let direct_cal = evaluate(&m2, Some(&c1), &data, &cfg).unwrap().accuracy;
        assert_eq!(rep.cells[1][0].to_bits(), direct_cal.to_bits());
    }
}
