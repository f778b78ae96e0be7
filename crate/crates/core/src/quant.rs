//! Weight quantization to k-bit codebooks or uniform affine grids.
//!
//! Quantization is per layer and skips biases. The codebook method runs
//! one-dimensional k-means with deterministic linspace seeding, the uniform
//! method snaps to an evenly spaced grid between the layer extremes.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use serde::{Deserialize, Serialize};

const KMEANS_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    Codebook,
    Uniform,
}

/// Quantizer settings. `per_layer` exists for forward compatibility and must
/// stay true; `seed` is recorded but unused by the deterministic methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub method: QuantMethod,
    #[serde(default = "default_true")]
    pub per_layer: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl QuantConfig {
    pub fn new(bits: u8, method: QuantMethod) -> Self {
        QuantConfig {
            bits,
            method,
            per_layer: true,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::invalid(format!(
                "quantization bits must be within 1..=16, got {}",
                self.bits
            )));
        }
        if !self.per_layer {
            return Err(Error::invalid("only per-layer quantization is supported"));
        }
        Ok(())
    }
}

/// Reconstruction rule for one quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Code {
    /// Explicit sorted level values.
    Levels(Vec<f64>),
    /// Evenly spaced grid: level i sits at min + i * step.
    Affine { min: f64, step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCode {
    pub layer: String,
    pub code: Code,
}

/// What a quantized model carries in its architecture record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub bits: u8,
    pub method: QuantMethod,
    pub codebooks: Vec<LayerCode>,
}

/// Index of the nearest value in a sorted slice. Ties pick the lower index.
fn nearest<T: Scalar>(sorted: &[T], v: T) -> usize {
    let mut lo = 0usize;
    let mut hi = sorted.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        // Compare against the midpoint between mid and mid+1.
        if v - sorted[mid] > sorted[mid + 1] - v {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

fn sorted_distinct<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v.dedup();
    v
}

/// One-dimensional k-means over `values` with k = 2^bits.
///
/// Centroids start on an even grid between the extremes. When the layer has
/// no more distinct values than levels, the distinct values themselves are
/// the codebook and the assignment is already the fixed point. Clusters that
/// empty out are reseeded at the midpoint of the widest gap between the
/// remaining centroids.
pub fn codebook_kmeans<T: Scalar>(values: &[T], bits: u8) -> Result<(Vec<T>, Vec<T>)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    let k = 1usize << bits;
    let distinct = sorted_distinct(values);
    if distinct.len() <= k {
        let out = values
            .iter()
            .map(|v| distinct[nearest(&distinct, *v)])
            .collect();
        return Ok((out, distinct));
    }
    let lo = distinct[0];
    let hi = *distinct.last().unwrap();
    let mut centroids: Vec<T> = (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            lo + (hi - lo) * T::from_f64_lit(t)
        })
        .collect();

    let mut assign = vec![0usize; values.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut moved = false;
        for (i, v) in values.iter().enumerate() {
            let a = nearest(&centroids, *v);
            if assign[i] != a {
                assign[i] = a;
                moved = true;
            }
        }
        let mut sums = vec![T::zero(); k];
        let mut counts = vec![0usize; k];
        for (i, v) in values.iter().enumerate() {
            sums[assign[i]] += *v;
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / T::from_f64_lit(counts[c] as f64);
            }
        }
        // Reseed empty clusters one at a time into the widest gap between
        // the centroids placed so far.
        let mut active: Vec<bool> = counts.iter().map(|n| *n > 0).collect();
        for c in 0..k {
            if active[c] {
                continue;
            }
            let mut occupied: Vec<T> = (0..k)
                .filter(|i| active[*i])
                .map(|i| centroids[i])
                .collect();
            occupied.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut best_gap = T::zero();
            let mut best_mid = centroids[c];
            for w in occupied.windows(2) {
                let gap = w[1] - w[0];
                if gap > best_gap {
                    best_gap = gap;
                    best_mid = (w[0] + w[1]) / T::from_f64_lit(2.0);
                }
            }
            centroids[c] = best_mid;
            active[c] = true;
        }
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if !moved {
            break;
        }
    }

    let out = values
        .iter()
        .map(|v| centroids[nearest(&centroids, *v)])
        .collect();
    Ok((out, centroids))
}

/// Snaps values to a 2^bits level grid spanning [min, max].
pub fn uniform_affine<T: Scalar>(values: &[T], bits: u8) -> Result<(Vec<T>, T, T)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    let k = 1usize << bits;
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    if lo == hi {
        return Ok((vec![lo; values.len()], lo, T::zero()));
    }
    let step = (hi - lo) / T::from_f64_lit((k - 1) as f64);
    let out = values
        .iter()
        .map(|v| {
            let q = ((*v - lo) / step).round();
            (lo + q * step).max(lo).min(hi)
        })
        .collect();
    Ok((out, lo, step))
}

/// Quantizes one weight tensor, returning the new tensor and its code.
pub fn quantize_layer<T: Scalar>(t: &TensorBase<T>, cfg: &QuantConfig) -> Result<(TensorBase<T>, Code)> {
    cfg.validate()?;
    if t.numel() == 0 {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    let (data, code) = match cfg.method {
        QuantMethod::Codebook => {
            let (data, levels) = codebook_kmeans(t.data(), cfg.bits)?;
            (data, Code::Levels(levels.iter().map(|v| v.to_f64_lit()).collect()))
        }
        QuantMethod::Uniform => {
            let (data, min, step) = uniform_affine(t.data(), cfg.bits)?;
            (
                data,
                Code::Affine {
                    min: min.to_f64_lit(),
                    step: step.to_f64_lit(),
                },
            )
        }
    };
    Ok((TensorBase::from_vec(t.shape().to_vec(), data)?, code))
}

/// Quantizes every weight layer of a model, leaving biases at full
/// precision. The returned model is frozen and carries a [`QuantRecord`];
/// the original is untouched.
pub fn quantize_model(model: &Model, cfg: &QuantConfig) -> Result<Model> {
    cfg.validate()?;
    let mut params = crate::Params::new();
    let mut codebooks = Vec::new();
    for (name, p) in model.params() {
        if name.ends_with(".b") {
            params.insert(name.clone(), p.clone());
            continue;
        }
        let (q, code) = quantize_layer(p, cfg)?;
        codebooks.push(LayerCode {
            layer: name.clone(),
            code,
        });
        params.insert(name.clone(), q);
    }
    let mut arch = model.arch().clone();
    arch.quant = Some(QuantRecord {
        bits: cfg.bits,
        method: cfg.method,
        codebooks,
    });
    let mut out = Model::from_parts(model.name().to_string(), arch, params, true);
    out.freeze();
    Ok(out)
}
