//! Merging perturbations into inputs and crafting them by signed-gradient
//! iteration, in both the adversarial and the restoring direction.

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::Model;
use crate::training::{check_one_hot, cross_entropy_graph, mean_true_prob_from};
use crate::{Graph, Tensor};
use serde::{Deserialize, Serialize};

/// How a perturbation combines with the input it was made for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `x + delta`; the do-nothing delta is 0.
    Additive,
    /// `x * delta`; the do-nothing delta is 1.
    Multiplicative,
}

impl MergeMode {
    /// Delta value that leaves inputs unchanged.
    pub fn identity(self) -> f64 {
        match self {
            MergeMode::Additive => 0.0,
            MergeMode::Multiplicative => 1.0,
        }
    }
}

/// Valid range of the data domain, applied after merging. Use
/// [`UNBOUNDED`] when inputs have no natural bounds.
pub const UNBOUNDED: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);

fn check_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::invalid(format!("bad input range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Applies `delta` to `x` and clamps the result into `input_range`. The
/// delta only needs to match element for element; a flat delta on image
/// inputs is fine.
pub fn merge(x: &Tensor, delta: &Tensor, mode: MergeMode, input_range: (f64, f64)) -> Result<Tensor> {
    check_range(input_range)?;
    if x.numel() != delta.numel() {
        return Err(Error::ShapeMismatch {
            op: "merge",
            lhs: x.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let (lo, hi) = input_range;
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(a, d)| {
            let v = match mode {
                MergeMode::Additive => a + d,
                MergeMode::Multiplicative => a * d,
            };
            v.max(lo).min(hi)
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Graph form of [`merge`], so gradients flow through the combination and
/// through the range clamp. A delta with the right number of elements but a
/// different shape (a dense calibrater emits flat rows for image inputs) is
/// reshaped to match.
pub fn merge_on_graph(
    g: &mut Graph,
    x: NodeId,
    delta: NodeId,
    mode: MergeMode,
    input_range: (f64, f64),
) -> Result<NodeId> {
    check_range(input_range)?;
    let x_shape = g.value(x).shape().to_vec();
    let delta = if g.value(delta).shape() != x_shape.as_slice()
        && g.value(delta).numel() == g.value(x).numel()
    {
        g.reshape(delta, &x_shape)?
    } else {
        delta
    };
    let merged = match mode {
        MergeMode::Additive => g.add(x, delta)?,
        MergeMode::Multiplicative => g.mul(x, delta)?,
    };
    let (lo, hi) = input_range;
    if lo.is_finite() || hi.is_finite() {
        g.clamp(merged, lo, hi)
    } else {
        Ok(merged)
    }
}

/// Settings for [`iterative_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: MergeMode,
    /// Perturbation budget. Additive deltas stay within `[-budget, budget]`;
    /// multiplicative deltas within `[exp(-budget), exp(budget)]`.
    pub budget: f64,
    /// Signed-gradient iterations.
    pub steps: usize,
    /// Per-step magnitude, in the same units as `budget`.
    pub step_size: f64,
    /// True pushes the classifier loss up (break the prediction); false
    /// pushes it down (repair the prediction).
    pub ascend: bool,
    pub input_range: (f64, f64),
}

impl AttackConfig {
    /// Step size that can cross the whole budget interval and back.
    pub fn default_step(budget: f64, steps: usize) -> f64 {
        if steps == 0 {
            0.0
        } else {
            2.0 * budget / steps as f64
        }
    }
}

/// Outcome of an iterative signed-gradient perturbation run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Inputs with the final delta merged in and clamped to the data range.
    pub perturbed: Tensor,
    /// The delta itself, same shape as the inputs.
    pub delta: Tensor,
    /// Mean true-class probability before the first step and after each
    /// step: `steps + 1` entries.
    pub true_prob_trace: Vec<f64>,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Crafts a per-example perturbation against a frozen classifier by
/// iterating signed-gradient steps on the cross-entropy of the true labels.
///
/// The working variable is the additive delta itself, or the log of the
/// multiplicative delta, projected onto `[-budget, budget]` after every
/// step. Ascending raises the loss like a classic iterative attack;
/// descending is the reverse run that repairs shifted inputs.
///
/// A zero budget or zero steps returns the inputs bit for bit.
pub fn iterative_attack(
    model: &Model,
    x: &Tensor,
    labels: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !model.frozen() {
        return Err(Error::NotFrozen(model.name().to_string()));
    }
    check_range(cfg.input_range)?;
    check_one_hot(labels)?;
    if labels.shape()[0] != x.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "attack_labels",
            lhs: vec![x.shape()[0]],
            rhs: vec![labels.shape()[0]],
        });
    }
    if labels.shape()[1] != model.arch().classes {
        return Err(Error::invalid(format!(
            "labels have {} classes, model {} has {}",
            labels.shape()[1],
            model.name(),
            model.arch().classes
        )));
    }
    if !cfg.budget.is_finite() || cfg.budget < 0.0 {
        return Err(Error::invalid(format!("bad budget {}", cfg.budget)));
    }
    let live = cfg.budget > 0.0 && cfg.steps > 0;
    if live && (!cfg.step_size.is_finite() || cfg.step_size <= 0.0) {
        return Err(Error::invalid(format!("bad step size {}", cfg.step_size)));
    }

    let id = cfg.mode.identity();
    let delta_of = |work: &[f64]| -> Result<Tensor> {
        let vals = match cfg.mode {
            MergeMode::Additive => work.to_vec(),
            MergeMode::Multiplicative => work.iter().map(|u| u.exp()).collect(),
        };
        Tensor::from_vec(x.shape().to_vec(), vals)
    };
    let probe = |delta: &Tensor, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let xl = g.leaf(x.clone())?;
        let dl = g.leaf(delta.clone().with_grad())?;
        let merged = merge_on_graph(&mut g, xl, dl, cfg.mode, cfg.input_range)?;
        let pass = model.forward(&mut g, merged)?;
        let sm = g.softmax(pass.output, 1)?;
        let prob = mean_true_prob_from(&g, sm, labels);
        if !want_grad {
            return Ok((prob, None));
        }
        let yl = g.leaf(labels.clone())?;
        let loss = cross_entropy_graph(&mut g, pass.output, yl)?;
        g.backward(loss)?;
        let grad = g
            .grad(dl)
            .ok_or_else(|| Error::MissingGrad("attack delta".to_string()))?
            .to_vec();
        Ok((prob, Some(grad)))
    };

    if !live {
        let delta = Tensor::filled(x.shape(), id);
        let (prob, _) = probe(&delta, false)?;
        return Ok(AttackResult {
            perturbed: x.clone(),
            delta,
            true_prob_trace: vec![prob],
        });
    }

    let dir = if cfg.ascend { 1.0 } else { -1.0 };
    let mut work = vec![0.0f64; x.numel()];
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let delta = delta_of(&work)?;
        let (prob, grad) = probe(&delta, true)?;
        trace.push(prob);
        let grad = grad.expect("probe with want_grad returns a gradient");
        for (w, gv) in work.iter_mut().zip(&grad) {
            // For multiplicative deltas the gradient is taken with respect
            // to delta = exp(w); the chain factor delta is positive, so the
            // sign carries over to w unchanged.
            *w = (*w + dir * cfg.step_size * sgn(*gv)).clamp(-cfg.budget, cfg.budget);
        }
    }
    let delta = delta_of(&work)?;
    let (prob, _) = probe(&delta, false)?;
    trace.push(prob);
    Ok(AttackResult {
        perturbed: merge(x, &delta, cfg.mode, cfg.input_range)?,
        delta,
        true_prob_trace: trace,
    })
}

/// Reverses the sign of a perturbation: negates additive deltas, inverts
/// multiplicative ones. Used to test that a learned repair, flipped around,
/// turns into an attack.
pub fn negate_delta(delta: &Tensor, mode: MergeMode) -> Result<Tensor> {
    let data: Vec<f64> = match mode {
        MergeMode::Additive => delta.data().iter().map(|v| -v).collect(),
        MergeMode::Multiplicative => {
            if delta.data().iter().any(|v| *v <= 0.0) {
                return Err(Error::invalid(
                    "cannot invert a multiplicative delta with entries <= 0",
                ));
            }
            delta.data().iter().map(|v| 1.0 / v).collect()
        }
    };
    Tensor::from_vec(delta.shape().to_vec(), data)
}

/// Renders a single-channel image delta as a binary PGM, mid-gray where the
/// delta does nothing, darker where it pushes down, brighter where it pushes
/// up. Scale is symmetric around the do-nothing value.
pub fn perturbation_pgm(delta: &Tensor, mode: MergeMode) -> Result<Vec<u8>> {
    let sh = delta.shape();
    if sh.len() < 2 {
        return Err(Error::invalid("delta must have height and width axes"));
    }
    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    if h * w != delta.numel() {
        return Err(Error::invalid(
            "expected one single-channel image, got extra channels or a batch",
        ));
    }
    let id = mode.identity();
    let maxdev = delta
        .data()
        .iter()
        .map(|v| (v - id).abs())
        .fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in delta.data() {
        let t = if maxdev == 0.0 { 0.0 } else { (v - id) / maxdev };
        out.push((128.0 + 127.0 * t).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Per-class breakdown of how far an attack moved the predictions.
pub fn flip_rate(model: &Model, before: &Tensor, after: &Tensor) -> Result<f64> {
    let a = model.classify(before)?;
    let b = model.classify(after)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let flipped = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(flipped as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec};
    use proptest::prelude::*;

    fn identity_linear() -> Model {
        // 2-in 2-out linear scorer with identity weights: logits equal the
        // input coordinates, so gradients are easy to reason about.
        let mut m = build_model("probe", &ArchSpec::linear(2, 2), 0).unwrap();
        m.params_mut()["fc.w"]
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        m.params_mut()["fc.b"].data_mut().copy_from_slice(&[0.0, 0.0]);
        m.freeze();
        m
    }

    fn one_hot(rows: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * k];
        for (i, c) in rows.iter().enumerate() {
            data[i * k + c] = 1.0;
        }
        Tensor::from_vec(vec![rows.len(), k], data).unwrap()
    }

    #[test]
    fn merge_applies_and_clamps() {
        let x = Tensor::from_vec(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        let d = Tensor::from_vec(vec![1, 3], vec![0.3, -0.8, 0.3]).unwrap();
        let add = merge(&x, &d, MergeMode::Additive, (0.0, 1.0)).unwrap();
        assert_eq!(add.data(), &[0.5, 0.0, 1.0]);

        let d = Tensor::from_vec(vec![1, 3], vec![2.0, 0.5, 2.0]).unwrap();
        let mul = merge(&x, &d, MergeMode::Multiplicative, (0.0, 1.0)).unwrap();
        assert_eq!(mul.data(), &[0.4, 0.25, 1.0]);

        let free = merge(&x, &d, MergeMode::Multiplicative, UNBOUNDED).unwrap();
        assert!((free.data()[2] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn merge_rejects_shape_mismatch_and_bad_range() {
        let x = Tensor::zeros(&[2, 2]);
        let d = Tensor::zeros(&[2, 3]);
        assert!(merge(&x, &d, MergeMode::Additive, UNBOUNDED).is_err());
        let d = Tensor::zeros(&[2, 2]);
        assert!(merge(&x, &d, MergeMode::Additive, (1.0, -1.0)).is_err());
        assert!(merge(&x, &d, MergeMode::Additive, (f64::NAN, 1.0)).is_err());
    }

    #[test]
    fn graph_merge_matches_plain_merge() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.1, 0.7, 0.4, 0.95]).unwrap();
        let d = Tensor::from_vec(vec![2, 2], vec![0.2, 0.5, -0.6, 0.2]).unwrap();
        let plain = merge(&x, &d, MergeMode::Additive, (0.0, 1.0)).unwrap();
        let mut g = Graph::new();
        let xl = g.leaf(x).unwrap();
        let dl = g.leaf(d).unwrap();
        let m = merge_on_graph(&mut g, xl, dl, MergeMode::Additive, (0.0, 1.0)).unwrap();
        assert_eq!(g.value(m).data(), plain.data());
    }

    #[test]
    fn ascending_attack_erodes_confidence() {
        let m = identity_linear();
        let x = Tensor::from_vec(vec![1, 2], vec![0.2, 0.2]).unwrap();
        let y = one_hot(&[0], 2);
        let cfg = AttackConfig {
            mode: MergeMode::Additive,
            budget: 0.5,
            steps: 10,
            step_size: 0.1,
            ascend: true,
            input_range: UNBOUNDED,
        };
        let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
        assert_eq!(out.true_prob_trace.len(), 11);
        assert!((out.true_prob_trace[0] - 0.5).abs() < 1e-12);
        // Saturates at logit gap -1: sigma(-1).
        let floor = 1.0 / (1.0 + 1.0f64.exp());
        assert!((out.true_prob_trace[10] - floor).abs() < 1e-12);
        assert!(out.delta.data().iter().all(|v| v.abs() <= 0.5 + 1e-15));
        assert_eq!(out.delta.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn descending_attack_restores_confidence() {
        let m = identity_linear();
        let x = Tensor::from_vec(vec![1, 2], vec![-0.3, 0.3]).unwrap();
        let y = one_hot(&[0], 2);
        let cfg = AttackConfig {
            mode: MergeMode::Additive,
            budget: 0.4,
            steps: 8,
            step_size: 0.1,
            ascend: false,
            input_range: UNBOUNDED,
        };
        let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
        let first = out.true_prob_trace[0];
        let last = *out.true_prob_trace.last().unwrap();
        assert!(first < 0.5);
        assert!(last > 0.5, "repair should cross the decision boundary");
        assert_eq!(m.classify(&out.perturbed).unwrap(), vec![0]);
    }

    #[test]
    fn multiplicative_attack_respects_log_budget() {
        let m = identity_linear();
        let x = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let y = one_hot(&[0], 2);
        let budget = 2.0f64.ln();
        let cfg = AttackConfig {
            mode: MergeMode::Multiplicative,
            budget,
            steps: 12,
            step_size: 0.2,
            ascend: true,
            input_range: UNBOUNDED,
        };
        let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
        let (lo, hi) = ((-budget).exp(), budget.exp());
        assert!(out
            .delta
            .data()
            .iter()
            .all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        assert!(*out.true_prob_trace.last().unwrap() < out.true_prob_trace[0]);
    }

    #[test]
    fn attack_keeps_inputs_in_range() {
        let m = identity_linear();
        let x = Tensor::from_vec(vec![2, 2], vec![0.05, 0.95, 0.5, 0.5]).unwrap();
        let y = one_hot(&[0, 1], 2);
        let cfg = AttackConfig {
            mode: MergeMode::Additive,
            budget: 0.9,
            steps: 6,
            step_size: 0.3,
            ascend: true,
            input_range: (0.0, 1.0),
        };
        let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
        assert!(out.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_budget_returns_inputs_bit_for_bit() {
        let m = identity_linear();
        let x = Tensor::from_vec(vec![1, 2], vec![0.123456789, -0.987654321]).unwrap();
        let y = one_hot(&[1], 2);
        let cfg = AttackConfig {
            mode: MergeMode::Multiplicative,
            budget: 0.0,
            steps: 50,
            step_size: 0.1,
            ascend: true,
            input_range: UNBOUNDED,
        };
        let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
        assert_eq!(out.perturbed.data(), x.data());
        assert!(out.delta.data().iter().all(|v| *v == 1.0));
        assert_eq!(out.true_prob_trace.len(), 1);
    }

    #[test]
    fn attack_requires_a_frozen_model() {
        let m = build_model("m", &ArchSpec::linear(2, 2), 0).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let y = one_hot(&[0], 2);
        let cfg = AttackConfig {
            mode: MergeMode::Additive,
            budget: 0.1,
            steps: 1,
            step_size: 0.1,
            ascend: true,
            input_range: UNBOUNDED,
        };
        match iterative_attack(&m, &x, &y, &cfg) {
            Err(Error::NotFrozen(name)) => assert_eq!(name, "m"),
            other => panic!("expected NotFrozen, got {other:?}"),
        }
    }

    #[test]
    fn negation_flips_both_modes() {
        let d = Tensor::from_vec(vec![1, 2], vec![0.25, -0.5]).unwrap();
        let n = negate_delta(&d, MergeMode::Additive).unwrap();
        assert_eq!(n.data(), &[-0.25, 0.5]);
        let d = Tensor::from_vec(vec![1, 2], vec![2.0, 0.5]).unwrap();
        let n = negate_delta(&d, MergeMode::Multiplicative).unwrap();
        assert_eq!(n.data(), &[0.5, 2.0]);
        let d = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(negate_delta(&d, MergeMode::Multiplicative).is_err());
    }

    #[test]
    fn pgm_render_centers_identity_at_mid_gray() {
        let d = Tensor::filled(&[1, 1, 2, 3], 1.0);
        let pgm = perturbation_pgm(&d, MergeMode::Multiplicative).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|b| *b == 128));

        let d = Tensor::from_vec(vec![2, 2], vec![0.0, 0.1, -0.2, 0.05]).unwrap();
        let pgm = perturbation_pgm(&d, MergeMode::Additive).unwrap();
        let px = &pgm[pgm.len() - 4..];
        assert_eq!(px[0], 128);
        assert_eq!(px[2], 1, "largest negative deviation maps darkest");
        assert_eq!(px[1], 192, "half of max deviation sits halfway up");
        let batch = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(perturbation_pgm(&batch, MergeMode::Additive).is_err());
    }

    #[test]
    fn flip_rate_counts_changed_predictions() {
        let m = identity_linear();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(flip_rate(&m, &a, &b).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn merged_values_respect_finite_ranges(
            xs in proptest::collection::vec(-2.0f64..2.0, 8),
            ds in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let x = Tensor::from_vec(vec![2, 4], xs).unwrap();
            let d = Tensor::from_vec(vec![2, 4], ds).unwrap();
            for mode in [MergeMode::Additive, MergeMode::Multiplicative] {
                let out = merge(&x, &d, mode, (0.0, 1.0)).unwrap();
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn additive_attack_never_exceeds_budget(seedbits in 0u64..1000) {
            let m = identity_linear();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seedbits);
            let x = Tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut rng);
            let y = one_hot(&[0, 1], 2);
            let cfg = AttackConfig {
                mode: MergeMode::Additive,
                budget: 0.3,
                steps: 5,
                step_size: 0.17,
                ascend: true,
                input_range: (-1.0, 1.0),
            };
            let out = iterative_attack(&m, &x, &y, &cfg).unwrap();
            prop_assert!(out.delta.data().iter().all(|v| v.abs() <= 0.3 + 1e-15));
        }
    }
}
