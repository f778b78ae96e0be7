//! Computation graph with reverse-mode differentiation.
//!
//! Nodes live in an arena in insertion order, which is already a topological
//! order, so backward is a single reverse sweep. Graphs are cheap and meant
//! to be rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Index of a node inside one graph. Ids are not portable across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Differentiable operation. `Affine` and `Clamp` carry scalar attributes,
/// everything else is configured by its input tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Leaf,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    Ln,
    Affine { mul: T, add: T },
    Clamp { lo: T, hi: T },
    Reshape { shape: Vec<usize> },
    Sum,
    Mean,
    MaxPool2d { k: usize, stride: usize },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Ln => "ln",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MaxPool2d { .. } => "max_pool2d",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Conv2d { .. } | Op::ConvTranspose2d { .. } | Op::Add | Op::Mul => 2,
            _ => 1,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: TensorBase<T>,
    needs_grad: bool,
    /// Argmax positions saved by max pooling.
    saved_idx: Vec<usize>,
}

/// Arena of nodes forming one forward pass.
#[derive(Default)]
pub struct GraphBase<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> GraphBase<T> {
    pub fn new() -> Self {
        GraphBase { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts an input tensor. Gradients flow into it only when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: TensorBase<T>) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        let needs = t.requires_grad();
        self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            needs_grad: needs,
            saved_idx: Vec::new(),
        })
    }

    /// Value computed at a node.
    pub fn value(&self, id: NodeId) -> &TensorBase<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at a node by the latest backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, node: Node<T>) -> Result<NodeId> {
        self.nodes.push(node);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node id {} out of range", id.0)));
        }
        Ok(())
    }

    /// Applies `op` to existing nodes, computing the output eagerly.
    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::invalid(format!(
                "{} expects {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        for id in inputs {
            self.check_id(*id)?;
        }
        let (value, saved_idx) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let mut value = value;
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        value.set_requires_grad(needs);
        self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            needs_grad: needs,
            saved_idx,
        })
    }

    fn shape_err(&self, op: &Op<T>, inputs: &[NodeId]) -> Error {
        let lhs = self.nodes[inputs[0].0].value.shape().to_vec();
        let rhs = inputs
            .get(1)
            .map(|id| self.nodes[id.0].value.shape().to_vec())
            .unwrap_or_default();
        Error::ShapeMismatch {
            op: op.name(),
            lhs,
            rhs,
        }
    }

    fn forward(&self, op: &Op<T>, inputs: &[NodeId]) -> Result<(TensorBase<T>, Vec<usize>)> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let mk = |shape: Vec<usize>, data: Vec<T>| {
            TensorBase::from_vec(shape, data).expect("kernel output shape")
        };
        let out = match op {
            Op::Leaf => return Err(Error::invalid("leaf is not applicable")),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_err(op, inputs));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                mk(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                if *stride == 0 {
                    return Err(Error::invalid("conv2d stride must be positive"));
                }
                if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
                    return Err(self.shape_err(op, inputs));
                }
                let (n, ci, h, wd) = dims4(x.shape());
                let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (ho, wo) = match (
                    kernels::conv_out(h, kh, *stride, *pad),
                    kernels::conv_out(wd, kw, *stride, *pad),
                ) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(self.shape_err(op, inputs)),
                };
                let data = kernels::conv2d(
                    x.data(),
                    w.data(),
                    (n, ci, h, wd),
                    (co, kh, kw),
                    *stride,
                    *pad,
                    ho,
                    wo,
                );
                mk(vec![n, co, ho, wo], data)
            }
            Op::ConvTranspose2d { stride, pad, out_pad } => {
                let (x, w) = (val(0), val(1));
                if *stride == 0 {
                    return Err(Error::invalid("conv_transpose2d stride must be positive"));
                }
                if *out_pad >= *stride {
                    return Err(Error::invalid(
                        "conv_transpose2d output padding must be below the stride",
                    ));
                }
                if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0] {
                    return Err(self.shape_err(op, inputs));
                }
                let (n, ci, h, wd) = dims4(x.shape());
                let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
                let (ho, wo) = match (
                    kernels::conv_t_out(h, kh, *stride, *pad, *out_pad),
                    kernels::conv_t_out(wd, kw, *stride, *pad, *out_pad),
                ) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(self.shape_err(op, inputs)),
                };
                let data = kernels::conv_t2d(
                    x.data(),
                    w.data(),
                    (n, ci, h, wd),
                    (co, kh, kw),
                    *stride,
                    *pad,
                    ho,
                    wo,
                );
                mk(vec![n, co, ho, wo], data)
            }
            Op::Add => {
                let (a, b) = (val(0), val(1));
                let data = if a.shape() == b.shape() {
                    a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect()
                } else if b.rank() == 1 && a.rank() == 2 && a.shape()[1] == b.shape()[0] {
                    let f = b.shape()[0];
                    a.data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| *x + b.data()[i % f])
                        .collect()
                } else if b.rank() == 1 && a.rank() == 4 && a.shape()[1] == b.shape()[0] {
                    let (_, c, h, w) = dims4(a.shape());
                    let hw = h * w;
                    a.data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| *x + b.data()[(i / hw) % c])
                        .collect()
                } else {
                    return Err(self.shape_err(op, inputs));
                };
                mk(a.shape().to_vec(), data)
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(op, inputs));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
                mk(a.shape().to_vec(), data)
            }
            Op::Relu => {
                let x = val(0);
                mk(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| v.max(T::zero())).collect(),
                )
            }
            Op::Tanh => {
                let x = val(0);
                mk(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())
            }
            Op::Sigmoid => {
                let x = val(0);
                let one = T::one();
                mk(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| one / (one + (-*v).exp())).collect(),
                )
            }
            Op::Softmax { axis } => {
                let x = val(0);
                if *axis >= x.rank() {
                    return Err(Error::invalid(format!(
                        "softmax axis {} out of range for rank {}",
                        axis,
                        x.rank()
                    )));
                }
                mk(
                    x.shape().to_vec(),
                    kernels::softmax(x.data(), x.shape(), *axis),
                )
            }
            Op::Ln => {
                let x = val(0);
                mk(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())
            }
            Op::Affine { mul, add } => {
                let x = val(0);
                mk(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| *v * *mul + *add).collect(),
                )
            }
            Op::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid("clamp bounds out of order"));
                }
                let x = val(0);
                mk(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| v.max(*lo).min(*hi)).collect(),
                )
            }
            Op::Reshape { shape } => val(0).reshaped(shape)?,
            Op::Sum => {
                let x = val(0);
                TensorBase::scalar(x.data().iter().copied().sum())
            }
            Op::Mean => {
                let x = val(0);
                let n = T::from_f64_lit(x.numel() as f64);
                TensorBase::scalar(x.data().iter().copied().sum::<T>() / n)
            }
            Op::MaxPool2d { k, stride } => {
                let x = val(0);
                if *k == 0 || *stride == 0 {
                    return Err(Error::invalid("max_pool2d window and stride must be positive"));
                }
                if x.rank() != 4 {
                    return Err(self.shape_err(op, inputs));
                }
                let (n, c, h, w) = dims4(x.shape());
                let (ho, wo) = match (
                    kernels::conv_out(h, *k, *stride, 0),
                    kernels::conv_out(w, *k, *stride, 0),
                ) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(self.shape_err(op, inputs)),
                };
                let (data, idx) = kernels::max_pool2d(x.data(), (n, c, h, w), *k, *stride, ho, wo);
                return Ok((mk(vec![n, c, ho, wo], data), idx));
            }
        };
        Ok((out, Vec::new()))
    }

    /// Runs reverse-mode differentiation from a scalar loss node.
    ///
    /// Every node reachable from the loss whose tensor requires a gradient
    /// ends up with a populated grad slot. Frozen leaves receive no gradient
    /// but gradients still flow through them. Any previous gradients in the
    /// graph are discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_id(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
                if self.nodes[i].needs_grad {
                    self.nodes[i].value.set_grad(Some(g));
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return Ok(());
        }
        let needs = |j: usize| self.nodes[node.inputs[j].0].needs_grad;
        let val = |j: usize| &self.nodes[node.inputs[j].0].value;
        let mut acc = |j: usize, contrib: Vec<T>| {
            let id = node.inputs[j].0;
            let slot = grads[id].get_or_insert_with(|| vec![T::zero(); contrib.len()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (da, db) =
                    kernels::matmul_bwd(a.data(), b.data(), g, m, k, n, needs(0), needs(1));
                if let Some(da) = da {
                    acc(0, da);
                }
                if let Some(db) = db {
                    acc(1, db);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (n, ci, h, wd) = dims4(x.shape());
                let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let (dx, dw) = kernels::conv2d_bwd(
                    x.data(),
                    w.data(),
                    g,
                    (n, ci, h, wd),
                    (co, kh, kw),
                    *stride,
                    *pad,
                    ho,
                    wo,
                    needs(0),
                    needs(1),
                );
                if let Some(dx) = dx {
                    acc(0, dx);
                }
                if let Some(dw) = dw {
                    acc(1, dw);
                }
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let (x, w) = (val(0), val(1));
                let (n, ci, h, wd) = dims4(x.shape());
                let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let (dx, dw) = kernels::conv_t2d_bwd(
                    x.data(),
                    w.data(),
                    g,
                    (n, ci, h, wd),
                    (co, kh, kw),
                    *stride,
                    *pad,
                    ho,
                    wo,
                    needs(0),
                    needs(1),
                );
                if let Some(dx) = dx {
                    acc(0, dx);
                }
                if let Some(dw) = dw {
                    acc(1, dw);
                }
            }
            Op::Add => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    acc(0, g.to_vec());
                }
                if needs(1) {
                    if a.shape() == b.shape() {
                        acc(1, g.to_vec());
                    } else {
                        let f = b.shape()[0];
                        let mut db = vec![T::zero(); f];
                        if a.rank() == 2 {
                            for (i, gv) in g.iter().enumerate() {
                                db[i % f] += *gv;
                            }
                        } else {
                            let (_, c, h, w) = dims4(a.shape());
                            let hw = h * w;
                            for (i, gv) in g.iter().enumerate() {
                                db[(i / hw) % c] += *gv;
                            }
                        }
                        acc(1, db);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    acc(0, g.iter().zip(b.data()).map(|(gv, bv)| *gv * *bv).collect());
                }
                if needs(1) {
                    acc(1, g.iter().zip(a.data()).map(|(gv, av)| *gv * *av).collect());
                }
            }
            Op::Relu => {
                let x = val(0);
                acc(
                    0,
                    g.iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > T::zero() { *gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh => {
                let y = &node.value;
                let one = T::one();
                acc(
                    0,
                    g.iter()
                        .zip(y.data())
                        .map(|(gv, yv)| *gv * (one - *yv * *yv))
                        .collect(),
                );
            }
            Op::Sigmoid => {
                let y = &node.value;
                let one = T::one();
                acc(
                    0,
                    g.iter()
                        .zip(y.data())
                        .map(|(gv, yv)| *gv * *yv * (one - *yv))
                        .collect(),
                );
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                acc(0, kernels::softmax_bwd(y.data(), g, y.shape(), *axis));
            }
            Op::Ln => {
                let x = val(0);
                acc(0, g.iter().zip(x.data()).map(|(gv, xv)| *gv / *xv).collect());
            }
            Op::Affine { mul, .. } => {
                acc(0, g.iter().map(|gv| *gv * *mul).collect());
            }
            Op::Clamp { lo, hi } => {
                let x = val(0);
                acc(
                    0,
                    g.iter()
                        .zip(x.data())
                        .map(|(gv, xv)| {
                            if *xv >= *lo && *xv <= *hi {
                                *gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Reshape { .. } => {
                acc(0, g.to_vec());
            }
            Op::Sum => {
                let x = val(0);
                acc(0, vec![g[0]; x.numel()]);
            }
            Op::Mean => {
                let x = val(0);
                let n = T::from_f64_lit(x.numel() as f64);
                acc(0, vec![g[0] / n; x.numel()]);
            }
            Op::MaxPool2d { .. } => {
                let x = val(0);
                let mut dx = vec![T::zero(); x.numel()];
                for (o, gv) in g.iter().enumerate() {
                    dx[node.saved_idx[o]] += *gv;
                }
                acc(0, dx);
            }
        }
        Ok(())
    }

    // Convenience constructors for each op.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        self.apply(Op::ConvTranspose2d { stride, pad, out_pad }, &[x, w])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Ln, &[x])
    }

    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> Result<NodeId> {
        self.apply(Op::Affine { mul, add }, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.apply(Op::MaxPool2d { k, stride }, &[x])
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(crate::Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x1x3x3 input, single 2x2 kernel, stride 1, no padding.
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]))
            .unwrap();
        let w = g.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv2d_padding_and_stride_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 28, 28])).unwrap();
        let w = g.leaf(Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 14, 14]);
    }

    #[test]
    fn conv_transpose_inverts_strided_shapes() {
        // Mirror of the 28 -> 14 -> 7 -> 4 contraction used by the image
        // calibrater, with per-layer output padding restoring odd sizes.
        let mut g = Graph::new();
        let mut x = g.leaf(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        for (target, out_pad) in [(7usize, 0usize), (14, 1), (28, 1)] {
            let w = g.leaf(Tensor::zeros(&[2, 2, 3, 3])).unwrap();
            x = g.conv_transpose2d(x, w, 2, 1, out_pad).unwrap();
            assert_eq!(g.value(x).shape()[2], target);
        }
    }

    #[test]
    fn conv_transpose_rejects_out_pad_at_stride() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let w = g.leaf(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(g.conv_transpose2d(x, w, 2, 1, 2).is_err());
    }

    #[test]
    fn add_broadcasts_row_and_channel_bias() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let b = g.leaf(t(&[3], &[10.0, 20.0, 30.0])).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 30.0, 11.0, 21.0, 31.0]);

        let img = g.leaf(Tensor::ones(&[1, 2, 2, 2])).unwrap();
        let cb = g.leaf(t(&[2], &[1.0, -1.0])).unwrap();
        let z = g.add(img, cb).unwrap();
        assert_eq!(g.value(z).data(), &[2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        for row in d.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn max_pool_keeps_first_of_ties() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[1, 1, 2, 2], &[7.0, 7.0, 7.0, 7.0]).with_grad())
            .unwrap();
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_leaves_pass_gradients_through() {
        // y = sum(relu(x . w)) with w frozen: x still gets a gradient, w
        // stays untouched.
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, -2.0]).with_grad()).unwrap();
        let w = g.leaf(t(&[2, 2], &[0.5, 1.0, -1.0, 2.0])).unwrap();
        let h = g.matmul(x, w).unwrap();
        let r = g.relu(h).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        let gx = g.grad(x).unwrap();
        // h = [2.5, -3.0], relu keeps only the first output.
        assert_eq!(gx, &[0.5, -1.0]);
    }

    #[test]
    fn same_node_used_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]).with_grad()).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 2]).with_grad()).unwrap();
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_twice_gives_fresh_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]).with_grad()).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.leaf(t(&[1], &[f64::NAN])),
            Err(crate::Error::NonFinite(_))
        ));
        let x = g.leaf(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.ln(x), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn clamp_saturates_and_blocks_gradient_outside() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[4], &[-2.0, -0.5, 0.5, 2.0]).with_grad())
            .unwrap();
        let y = g.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -0.5, 0.5, 1.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_node_id_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1])).unwrap();
        let mut other = Graph::new();
        assert!(other.relu(x).is_err());
        assert!(g.relu(x).is_ok());
    }

    #[test]
    fn reshape_checks_element_count() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(g.reshape(x, &[7]).is_err());
        let y = g.reshape(x, &[6]).unwrap();
        assert_eq!(g.value(y).shape(), &[6]);
    }

    #[test]
    fn mean_and_sum_reduce_to_scalars() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad()).unwrap();
        let s = g.sum(x).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 10.0);
        assert_eq!(g.value(m).item().unwrap(), 2.5);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn works_at_f32() {
        let mut g: GraphBase<f32> = GraphBase::new();
        let x = g
            .leaf(TensorBase::from_vec(vec![1, 2], vec![0.5f32, -0.5]).unwrap().with_grad())
            .unwrap();
        let w = g
            .leaf(TensorBase::from_vec(vec![2, 1], vec![2.0f32, 1.0]).unwrap())
            .unwrap();
        let y = g.matmul(x, w).unwrap();
        let t = g.tanh(y).unwrap();
        let s = g.sum(t).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        let expect = 1.0f32 - 0.5f32.tanh().powi(2);
        assert!((gx[0] - 2.0 * expect).abs() < 1e-6);
        assert!((gx[1] - expect).abs() < 1e-6);
    }
}
