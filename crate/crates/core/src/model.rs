//! Model zoo: compact classifiers and generative input calibraters.
//!
//! Every model is an [`ArchSpec`] plus a named parameter set. Forward passes
//! bind the parameters as graph leaves, so one model can serve any number of
//! throwaway graphs.

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::hash::ContentHash;
use crate::quant::QuantRecord;
use crate::{Graph, Params, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Model family. Calibraters are generators emitting one perturbation value
/// per input element; the other three are classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Mlp,
    Convnet,
    Calibrater,
}

/// Output head of a calibrater, fixing the perturbation's merge semantics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    /// delta = 1 + tanh(z), bounded to (0, 2), merged by multiplication.
    Multiplicative,
    /// delta = eps * tanh(z), bounded to (-eps, eps), merged by addition.
    Additive { eps: f64 },
}

impl Head {
    /// How deltas from this head combine with inputs.
    pub fn merge_mode(&self) -> crate::perturb::MergeMode {
        match self {
            Head::Multiplicative => crate::perturb::MergeMode::Multiplicative,
            Head::Additive { .. } => crate::perturb::MergeMode::Additive,
        }
    }
}

/// Architecture description, serialized into saved model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    /// Per-example input shape: `[d]` for vector data, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    /// Classifier output count. Zero for calibraters.
    #[serde(default)]
    pub classes: usize,
    /// Hidden widths of mlp classifiers and dense calibraters.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Base channel count of convnets and convolutional calibraters.
    #[serde(default)]
    pub channels: usize,
    /// Residual block count of convolutional calibraters.
    #[serde(default)]
    pub blocks: usize,
    /// Calibrater head. None for classifiers.
    #[serde(default)]
    pub head: Option<Head>,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
    /// Present once a model went through weight quantization.
    #[serde(default)]
    pub quant: Option<QuantRecord>,
}

impl ArchSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        ArchSpec {
            family: Family::Linear,
            input_shape: vec![input_dim],
            classes,
            hidden: Vec::new(),
            channels: 0,
            blocks: 0,
            head: None,
            init_seed: 0,
            quant: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ArchSpec {
            family: Family::Mlp,
            input_shape: vec![input_dim],
            classes,
            hidden,
            channels: 0,
            blocks: 0,
            head: None,
            init_seed: 0,
            quant: None,
        }
    }

    /// Two 5x5 conv blocks with max pooling, then two dense layers.
    pub fn convnet(input_shape: [usize; 3], channels: usize, classes: usize) -> Self {
        ArchSpec {
            family: Family::Convnet,
            input_shape: input_shape.to_vec(),
            classes,
            hidden: Vec::new(),
            channels,
            blocks: 0,
            head: None,
            init_seed: 0,
            quant: None,
        }
    }

    /// Fully convolutional encoder/decoder calibrater: three stride-2
    /// downsampling convs, `blocks` residual blocks, three stride-2
    /// transposed convs back to the input shape.
    pub fn calibrater_conv(input_shape: [usize; 3], channels: usize, blocks: usize, head: Head) -> Self {
        ArchSpec {
            family: Family::Calibrater,
            input_shape: input_shape.to_vec(),
            classes: 0,
            hidden: Vec::new(),
            channels,
            blocks,
            head: Some(head),
            init_seed: 0,
            quant: None,
        }
    }

    /// Dense generator calibrater for vector data.
    pub fn calibrater_dense(input_dim: usize, hidden: Vec<usize>, head: Head) -> Self {
        ArchSpec {
            family: Family::Calibrater,
            input_shape: vec![input_dim],
            classes: 0,
            hidden,
            channels: 0,
            blocks: 0,
            head: Some(head),
            init_seed: 0,
            quant: None,
        }
    }

    pub fn is_calibrater(&self) -> bool {
        self.family == Family::Calibrater
    }

    fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial sizes along the calibrater's downsampling path, input first.
    fn down_sizes(&self) -> Result<Vec<usize>> {
        let h = self.input_shape[1];
        if self.input_shape[1] != self.input_shape[2] {
            return Err(Error::invalid("convolutional calibrater needs square input"));
        }
        let mut sizes = vec![h];
        for _ in 0..3 {
            let s = *sizes.last().unwrap();
            if s < 2 {
                return Err(Error::invalid(format!(
                    "input size {h} too small for three stride-2 stages"
                )));
            }
            sizes.push((s - 1) / 2 + 1);
        }
        Ok(sizes)
    }

    /// Ordered parameter names and shapes. The single source of truth shared
    /// by initialization, counting, and the file format.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let dense = |name: &str, din: usize, dout: usize, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{name}.w"), vec![din, dout]));
            out.push((format!("{name}.b"), vec![dout]));
        };
        match self.family {
            Family::Linear => {
                if self.classes == 0 {
                    return Err(Error::invalid("classifier needs at least one class"));
                }
                dense("fc", self.input_dim(), self.classes, &mut out);
            }
            Family::Mlp => {
                if self.classes == 0 {
                    return Err(Error::invalid("classifier needs at least one class"));
                }
                let mut din = self.input_dim();
                for (i, h) in self.hidden.iter().enumerate() {
                    dense(&format!("fc{}", i + 1), din, *h, &mut out);
                    din = *h;
                }
                dense(&format!("fc{}", self.hidden.len() + 1), din, self.classes, &mut out);
            }
            Family::Convnet => {
                if self.input_shape.len() != 3 {
                    return Err(Error::invalid("convnet needs a [c, h, w] input shape"));
                }
                if self.classes == 0 || self.channels == 0 {
                    return Err(Error::invalid("convnet needs classes and channels"));
                }
                let (ci, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let c = self.channels;
                let (h1, w1) = (h.checked_sub(4), w.checked_sub(4));
                let (h1, w1) = match (h1, w1) {
                    (Some(a), Some(b)) if a >= 2 && b >= 2 => (a / 2, b / 2),
                    _ => return Err(Error::invalid("input too small for 5x5 convolutions")),
                };
                let (h2, w2) = match (h1.checked_sub(4), w1.checked_sub(4)) {
                    (Some(a), Some(b)) if a >= 2 && b >= 2 => (a / 2, b / 2),
                    _ => return Err(Error::invalid("input too small for 5x5 convolutions")),
                };
                out.push(("conv1.w".into(), vec![c, ci, 5, 5]));
                out.push(("conv1.b".into(), vec![c]));
                out.push(("conv2.w".into(), vec![2 * c, c, 5, 5]));
                out.push(("conv2.b".into(), vec![2 * c]));
                dense("fc1", 2 * c * h2 * w2, 8 * c, &mut out);
                dense("fc2", 8 * c, self.classes, &mut out);
            }
            Family::Calibrater => {
                if self.head.is_none() {
                    return Err(Error::invalid("calibrater needs a head"));
                }
                match self.input_shape.len() {
                    1 => {
                        if self.hidden.is_empty() {
                            return Err(Error::invalid("dense calibrater needs hidden widths"));
                        }
                        let mut din = self.input_dim();
                        for (i, h) in self.hidden.iter().enumerate() {
                            dense(&format!("fc{}", i + 1), din, *h, &mut out);
                            din = *h;
                        }
                        dense(&format!("fc{}", self.hidden.len() + 1), din, self.input_dim(), &mut out);
                    }
                    3 => {
                        if self.channels == 0 {
                            return Err(Error::invalid("convolutional calibrater needs channels"));
                        }
                        self.down_sizes()?;
                        let ci = self.input_shape[0];
                        let c = self.channels;
                        out.push(("down1.w".into(), vec![c, ci, 3, 3]));
                        out.push(("down1.b".into(), vec![c]));
                        for i in 2..=3 {
                            out.push((format!("down{i}.w"), vec![c, c, 3, 3]));
                            out.push((format!("down{i}.b"), vec![c]));
                        }
                        for r in 1..=self.blocks {
                            for half in ["a", "b"] {
                                out.push((format!("res{r}{half}.w"), vec![c, c, 3, 3]));
                                out.push((format!("res{r}{half}.b"), vec![c]));
                            }
                        }
                        for i in 1..=2 {
                            out.push((format!("up{i}.w"), vec![c, c, 3, 3]));
                            out.push((format!("up{i}.b"), vec![c]));
                        }
                        out.push(("up3.w".into(), vec![c, ci, 3, 3]));
                        out.push(("up3.b".into(), vec![ci]));
                    }
                    _ => return Err(Error::invalid("calibrater input must be rank 1 or 3")),
                }
            }
        }
        Ok(out)
    }

    /// Total number of scalar parameters this spec would allocate.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// Name of the output layer whose weights start at zero so an untrained
    /// calibrater emits the exact identity perturbation.
    fn zero_init_layer(&self) -> Option<String> {
        if !self.is_calibrater() {
            return None;
        }
        Some(if self.input_shape.len() == 1 {
            format!("fc{}", self.hidden.len() + 1)
        } else {
            "up3".to_string()
        })
    }
}

/// Forward-pass record: the output node plus each parameter's leaf node, so
/// gradients can be copied back after backward.
pub struct ForwardPass {
    pub output: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// A named architecture with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    name: String,
    arch: ArchSpec,
    params: Params,
    frozen: bool,
}

/// Builds a model with uniform fan-in initialization from `seed`.
///
/// Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in a single
/// seeded stream, in parameter order. A calibrater's final layer starts at
/// zero instead, so the untrained generator is exactly the identity.
pub fn build_model(name: impl Into<String>, spec: &ArchSpec, seed: u64) -> Result<Model> {
    let mut arch = spec.clone();
    arch.init_seed = seed;
    let shapes = arch.param_shapes()?;
    let zero_layer = arch.zero_init_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (pname, shape) in shapes {
        let fan_in = match shape.len() {
            2 => shape[0],
            4 => {
                if pname.starts_with("up") {
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1] * shape[2] * shape[3]
                }
            }
            _ => {
                // Bias: reuse the matching weight's fan-in by convention.
                params
                    .get(&pname.replace(".b", ".w"))
                    .map(|w: &Tensor| match w.rank() {
                        2 => w.shape()[0],
                        _ => w.shape()[1] * w.shape()[2] * w.shape()[3],
                    })
                    .unwrap_or(1)
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let zeroed = zero_layer
            .as_deref()
            .map(|zl| pname.starts_with(zl))
            .unwrap_or(false);
        let mut t = if zeroed {
            Tensor::zeros(&shape)
        } else {
            Tensor::rand_uniform(&shape, -bound, bound, &mut rng)
        };
        t.set_requires_grad(true);
        params.insert(pname, t);
    }
    Ok(Model {
        name: name.into(),
        arch,
        params,
        frozen: false,
    })
}

impl Model {
    /// Assembles a model from existing parts. Gradient tracking follows the
    /// frozen flag.
    pub fn from_parts(name: impl Into<String>, arch: ArchSpec, mut params: Params, frozen: bool) -> Self {
        for p in params.values_mut() {
            p.set_requires_grad(!frozen);
        }
        Model {
            name: name.into(),
            arch,
            params,
            frozen,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn arch_mut(&mut self) -> &mut ArchSpec {
        &mut self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as non-trainable. Gradients still flow through
    /// the model toward its inputs.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params.values_mut() {
            p.set_requires_grad(false);
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    /// Content hash over parameter names, shapes, and values.
    pub fn param_hash(&self) -> String {
        let mut h = ContentHash::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update_usizes(p.shape());
            h.update_f64s(p.data());
        }
        h.finish()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == self.arch.input_shape.len() + 1
            && shape[1..] == self.arch.input_shape[..];
        // Vector models also accept image batches, flattening internally.
        let flat_ok = self.arch.input_shape.len() == 1
            && shape.len() > 1
            && shape[1..].iter().product::<usize>() == self.arch.input_shape[0];
        if ok || flat_ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: self.arch.input_shape.clone(),
            })
        }
    }

    /// Runs the model on `input`, returning the output node and parameter
    /// bindings. Calibrater outputs are the perturbation delta, after the
    /// head; classifier outputs are raw logits.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<ForwardPass> {
        if self.params.is_empty() {
            return Err(Error::invalid(format!("model {} has no parameters", self.name)));
        }
        self.check_input(&g.value(input).shape().to_vec())?;
        let mut bound: Vec<(String, NodeId)> = Vec::with_capacity(self.params.len());
        let bind = |g: &mut Graph, name: &str, params: &Params, bound: &mut Vec<(String, NodeId)>| {
            let id = g.leaf(params[name].clone())?;
            bound.push((name.to_string(), id));
            Ok::<NodeId, Error>(id)
        };
        let n = g.value(input).shape()[0];

        let output = match self.arch.family {
            Family::Linear | Family::Mlp => {
                let mut x = self.flatten(g, input, n)?;
                let layers = match self.arch.family {
                    Family::Linear => 1,
                    _ => self.arch.hidden.len() + 1,
                };
                for i in 1..=layers {
                    let prefix = if self.arch.family == Family::Linear {
                        "fc".to_string()
                    } else {
                        format!("fc{i}")
                    };
                    let w = bind(g, &format!("{prefix}.w"), &self.params, &mut bound)?;
                    let b = bind(g, &format!("{prefix}.b"), &self.params, &mut bound)?;
                    let mm = g.matmul(x, w)?;
                    x = g.add(mm, b)?;
                    if i < layers {
                        x = g.relu(x)?;
                    }
                }
                x
            }
            Family::Convnet => {
                let mut x = input;
                for i in 1..=2 {
                    let w = bind(g, &format!("conv{i}.w"), &self.params, &mut bound)?;
                    let b = bind(g, &format!("conv{i}.b"), &self.params, &mut bound)?;
                    let c = g.conv2d(x, w, 1, 0)?;
                    let cb = g.add(c, b)?;
                    let r = g.relu(cb)?;
                    x = g.max_pool2d(r, 2, 2)?;
                }
                let shape = g.value(x).shape().to_vec();
                let flat = shape[1] * shape[2] * shape[3];
                x = g.reshape(x, &[n, flat])?;
                for i in 1..=2 {
                    let w = bind(g, &format!("fc{i}.w"), &self.params, &mut bound)?;
                    let b = bind(g, &format!("fc{i}.b"), &self.params, &mut bound)?;
                    let mm = g.matmul(x, w)?;
                    x = g.add(mm, b)?;
                    if i == 1 {
                        x = g.relu(x)?;
                    }
                }
                x
            }
            Family::Calibrater => {
                let z = if self.arch.input_shape.len() == 1 {
                    let mut x = self.flatten(g, input, n)?;
                    let layers = self.arch.hidden.len() + 1;
                    for i in 1..=layers {
                        let w = bind(g, &format!("fc{i}.w"), &self.params, &mut bound)?;
                        let b = bind(g, &format!("fc{i}.b"), &self.params, &mut bound)?;
                        let mm = g.matmul(x, w)?;
                        x = g.add(mm, b)?;
                        if i < layers {
                            x = g.relu(x)?;
                        }
                    }
                    x
                } else {
                    let sizes = self.arch.down_sizes()?;
                    let mut x = input;
                    for i in 1..=3 {
                        let w = bind(g, &format!("down{i}.w"), &self.params, &mut bound)?;
                        let b = bind(g, &format!("down{i}.b"), &self.params, &mut bound)?;
                        let c = g.conv2d(x, w, 2, 1)?;
                        let cb = g.add(c, b)?;
                        x = g.relu(cb)?;
                    }
                    for r in 1..=self.arch.blocks {
                        let wa = bind(g, &format!("res{r}a.w"), &self.params, &mut bound)?;
                        let ba = bind(g, &format!("res{r}a.b"), &self.params, &mut bound)?;
                        let wb = bind(g, &format!("res{r}b.w"), &self.params, &mut bound)?;
                        let bb = bind(g, &format!("res{r}b.b"), &self.params, &mut bound)?;
                        let c1 = g.conv2d(x, wa, 1, 1)?;
                        let c1b = g.add(c1, ba)?;
                        let a1 = g.relu(c1b)?;
                        let c2 = g.conv2d(a1, wb, 1, 1)?;
                        let c2b = g.add(c2, bb)?;
                        x = g.add(c2b, x)?;
                    }
                    for i in 1..=3 {
                        // Output padding restores the pre-downsampling size.
                        let (src, target) = (sizes[4 - i], sizes[3 - i]);
                        let out_pad = target - ((src - 1) * 2 + 1);
                        let w = bind(g, &format!("up{i}.w"), &self.params, &mut bound)?;
                        let b = bind(g, &format!("up{i}.b"), &self.params, &mut bound)?;
                        let c = g.conv_transpose2d(x, w, 2, 1, out_pad)?;
                        x = g.add(c, b)?;
                        if i < 3 {
                            x = g.relu(x)?;
                        }
                    }
                    x
                };
                let t = g.tanh(z)?;
                match self.arch.head.expect("calibrater head") {
                    Head::Multiplicative => g.affine(t, 1.0, 1.0)?,
                    Head::Additive { eps } => g.affine(t, eps, 0.0)?,
                }
            }
        };
        Ok(ForwardPass {
            output,
            params: bound,
        })
    }

    fn flatten(&self, g: &mut Graph, input: NodeId, n: usize) -> Result<NodeId> {
        if g.value(input).rank() == 2 {
            Ok(input)
        } else {
            let flat = g.value(input).numel() / n;
            g.reshape(input, &[n, flat])
        }
    }

    /// Convenience forward pass returning the output tensor.
    pub fn output(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone())?;
        let pass = self.forward(&mut g, input)?;
        Ok(g.value(pass.output).clone())
    }

    /// Predicted class per example. Ties resolve to the lowest index.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        if self.arch.is_calibrater() {
            return Err(Error::invalid("calibraters do not classify"));
        }
        let logits = self.output(x)?;
        let c = self.arch.classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0usize;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Copies gradients from a finished backward pass into the parameters,
    /// overwriting previous ones. Frozen parameters are left untouched.
    pub fn collect_grads(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        for (name, id) in &pass.params {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if !p.requires_grad() {
                continue;
            }
            match g.grad(*id) {
                Some(grad) => p.set_grad(Some(grad.to_vec())),
                None => return Err(Error::MissingGrad(name.clone())),
            }
        }
        Ok(())
    }
}

/// Largest calibrater spec whose parameter count stays within
/// `frac * main_param_count`, searched over channels and residual blocks
/// (or hidden width for vector inputs). Ties prefer fewer blocks, then
/// fewer channels.
pub fn size_calibrater(input_shape: &[usize], head: Head, main_param_count: usize, frac: f64) -> Result<ArchSpec> {
    if !(0.0..=1.0).contains(&frac) || frac <= 0.0 {
        return Err(Error::invalid("size fraction must be in (0, 1]"));
    }
    let budget = (frac * main_param_count as f64).floor() as usize;
    let mut best: Option<(usize, usize, ArchSpec)> = None;
    let mut consider = |spec: ArchSpec, blocks: usize| -> Result<()> {
        let count = spec.param_count()?;
        if count > budget {
            return Ok(());
        }
        let better = match &best {
            None => true,
            Some((bc, bb, _)) => count > *bc || (count == *bc && blocks < *bb),
        };
        if better {
            best = Some((count, blocks, spec));
        }
        Ok(())
    };
    match input_shape.len() {
        3 => {
            let shape = [input_shape[0], input_shape[1], input_shape[2]];
            for blocks in 1..=3 {
                for channels in 2..=64 {
                    consider(ArchSpec::calibrater_conv(shape, channels, blocks, head), blocks)?;
                }
            }
        }
        1 => {
            for width in 2..=256 {
                consider(
                    ArchSpec::calibrater_dense(input_shape[0], vec![width, width], head),
                    0,
                )?;
            }
        }
        _ => return Err(Error::invalid("calibrater input must be rank 1 or 3")),
    }
    best.map(|(_, _, spec)| spec).ok_or_else(|| {
        Error::invalid(format!(
            "no calibrater fits within {budget} parameters"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_are_seed_deterministic() {
        let spec = ArchSpec::mlp(4, vec![8], 3);
        let a = build_model("m", &spec, 11).unwrap();
        let b = build_model("m", &spec, 11).unwrap();
        let c = build_model("m", &spec, 12).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = ArchSpec::convnet([1, 28, 28], 4, 10);
        let m = build_model("m", &spec, 5).unwrap();
        // conv2 kernels see 4 channels of 5x5 patches.
        let bound = 1.0 / (4.0f64 * 25.0).sqrt();
        let w = &m.params()["conv2.w"];
        assert!(w.data().iter().all(|v| v.abs() < bound));
        // Not degenerate: spreads over a reasonable share of the range.
        let spread = w.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(spread > bound * 0.5);
    }

    #[test]
    fn count_params_matches_hand_formula() {
        let lin = build_model("l", &ArchSpec::linear(3, 2), 0).unwrap();
        assert_eq!(lin.count_params(), 3 * 2 + 2);
        let conv = build_model("c", &ArchSpec::convnet([1, 28, 28], 8, 10), 0).unwrap();
        let expect = 8 * 25 + 8          // conv1
            + 16 * 8 * 25 + 16           // conv2
            + 256 * 64 + 64              // fc1
            + 64 * 10 + 10;              // fc2
        assert_eq!(conv.count_params(), expect);
        assert_eq!(conv.arch().param_count().unwrap(), expect);
    }

    #[test]
    fn empty_model_counts_zero() {
        let m = Model::from_parts("e", ArchSpec::linear(1, 1), Params::new(), false);
        assert_eq!(m.count_params(), 0);
        assert!(m.output(&Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn classify_breaks_ties_toward_lowest_index() {
        let spec = ArchSpec::linear(2, 3);
        let mut m = build_model("m", &spec, 0).unwrap();
        for p in m.params_mut().values_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&vec![0.0; n]);
        }
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        assert_eq!(m.classify(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn freeze_blocks_gradients_but_not_flow() {
        let spec = ArchSpec::mlp(3, vec![4], 2);
        let mut m = build_model("m", &spec, 3).unwrap();
        m.freeze();
        assert!(m.frozen());
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::from_vec(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap().with_grad())
            .unwrap();
        let pass = m.forward(&mut g, x).unwrap();
        let s = g.sum(pass.output).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        for (_, id) in &pass.params {
            assert!(g.grad(*id).is_none());
        }
    }

    #[test]
    fn unfrozen_model_receives_all_gradients() {
        let spec = ArchSpec::convnet([1, 16, 16], 2, 4);
        let mut m = build_model("m", &spec, 3).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 1, 16, 16])).unwrap();
        let pass = m.forward(&mut g, x).unwrap();
        let sm = g.softmax(pass.output, 1).unwrap();
        let s = g.mean(sm).unwrap();
        g.backward(s).unwrap();
        m.collect_grads(&g, &pass).unwrap();
        for (name, p) in m.params() {
            assert!(p.grad().is_some(), "{name} missing grad");
        }
    }

    #[test]
    fn untrained_calibrater_is_exact_identity() {
        let x = Tensor::rand_uniform(
            &[2, 1, 12, 12],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let spec = ArchSpec::calibrater_conv([1, 12, 12], 3, 1, Head::Multiplicative);
        let m = build_model("g", &spec, 7).unwrap();
        let delta = m.output(&x).unwrap();
        assert!(delta.data().iter().all(|v| *v == 1.0));

        let spec = ArchSpec::calibrater_dense(5, vec![8, 8], Head::Additive { eps: 0.5 });
        let m = build_model("g", &spec, 7).unwrap();
        let x = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let delta = m.output(&x).unwrap();
        assert!(delta.data().iter().all(|v| *v == 0.0));
    }

    fn scramble(m: &mut Model, lim: f64, rng: &mut ChaCha8Rng) {
        for p in m.params_mut().values_mut() {
            let n = p.numel();
            let noise = Tensor::rand_uniform(&[n], -lim, lim, rng);
            p.data_mut().copy_from_slice(noise.data());
        }
    }

    #[test]
    fn trained_heads_stay_in_range() {
        let spec = ArchSpec::calibrater_conv([1, 12, 12], 3, 1, Head::Multiplicative);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 1, 12, 12], 0.0, 1.0, &mut rng);

        // Moderate weights keep tanh away from float saturation: open interval.
        let mut m = build_model("g", &spec, 7).unwrap();
        scramble(&mut m, 0.2, &mut rng);
        let delta = m.output(&x).unwrap();
        assert!(delta.data().iter().all(|v| *v > 0.0 && *v < 2.0));
        assert!(delta.data().iter().any(|v| *v != 1.0));

        // Extreme weights may saturate tanh to exactly +/-1, never beyond.
        let mut m = build_model("g", &spec, 7).unwrap();
        scramble(&mut m, 2.0, &mut rng);
        let delta = m.output(&x).unwrap();
        assert!(delta.data().iter().all(|v| *v >= 0.0 && *v <= 2.0));

        let spec = ArchSpec::calibrater_dense(6, vec![12], Head::Additive { eps: 0.25 });
        let mut m = build_model("g", &spec, 7).unwrap();
        scramble(&mut m, 2.0, &mut rng);
        let x = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let delta = m.output(&x).unwrap();
        assert!(delta.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn vector_models_flatten_image_batches() {
        let spec = ArchSpec::mlp(16, vec![6], 2);
        let m = build_model("m", &spec, 1).unwrap();
        let x = Tensor::ones(&[3, 1, 4, 4]);
        assert_eq!(m.classify(&x).unwrap().len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let spec = ArchSpec::convnet([1, 28, 28], 4, 10);
        let m = build_model("m", &spec, 1).unwrap();
        assert!(m.output(&Tensor::zeros(&[2, 1, 27, 27])).is_err());
    }

    #[test]
    fn sizing_maximizes_within_budget() {
        let main = build_model("main", &ArchSpec::convnet([1, 28, 28], 8, 10), 0).unwrap();
        let budget = main.count_params() / 10;
        let spec = size_calibrater(&[1, 28, 28], Head::Multiplicative, main.count_params(), 0.1).unwrap();
        let count = spec.param_count().unwrap();
        assert!(count <= budget);
        // Maximal at one step of granularity: one more channel or block
        // would blow the budget.
        let mut wider = spec.clone();
        wider.channels += 1;
        assert!(wider.param_count().unwrap() > budget);
        assert!(count * 10 > main.count_params() / 2, "absurdly small pick");
    }

    #[test]
    fn sizing_handles_vector_inputs() {
        let spec = size_calibrater(&[2], Head::Additive { eps: 1.0 }, 5000, 0.1).unwrap();
        assert!(spec.param_count().unwrap() <= 500);
        assert_eq!(spec.input_shape, vec![2]);
    }

    #[test]
    fn sizing_rejects_impossible_budget() {
        assert!(size_calibrater(&[1, 28, 28], Head::Multiplicative, 10, 0.1).is_err());
    }
}
