//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{GraphBase, NodeId};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates. Coordinates where both
    /// gradients are near zero are compared absolutely instead.
    pub max_err: f64,
    /// Coordinate index of the worst error.
    pub worst_index: usize,
    pub pass: bool,
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// finite differences with step `h`, coordinate by coordinate.
///
/// `f` must build a fresh graph from the provided leaf and return a scalar
/// loss node. It is re-invoked twice per coordinate for the numeric side.
pub fn grad_check<T, F>(f: F, point: &TensorBase<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut GraphBase<T>, NodeId) -> Result<NodeId>,
{
    let mut g = GraphBase::new();
    let mut leaf = point.clone();
    leaf.set_requires_grad(true);
    let x = g.leaf(leaf)?;
    let loss = f(&mut g, x)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::invalid("grad_check needs a scalar loss"));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = g
        .grad(x)
        .ok_or_else(|| Error::MissingGrad("grad_check input".into()))?
        .iter()
        .map(|v| v.to_f64_lit())
        .collect();

    let eval = |data: &TensorBase<T>| -> Result<f64> {
        let mut g = GraphBase::new();
        let x = g.leaf(data.clone())?;
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item()?.to_f64_lit())
    };

    let step = T::from_f64_lit(h);
    let mut max_err = 0.0f64;
    let mut worst_index = 0usize;
    for i in 0..point.numel() {
        let orig = point.data()[i];
        let mut plus = point.clone();
        plus.data_mut()[i] = orig + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = orig - step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom > 1e-6 {
            (a - numeric).abs() / denom
        } else {
            (a - numeric).abs()
        };
        if err > max_err {
            max_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_err,
        worst_index,
        pass: max_err < tol,
    })
}

/// Runs `grad_check` on every differentiable primitive at `points` random
/// input points each, returning the worst report per primitive.
///
/// Test points avoid the kinks of relu, clamp, and max pooling so central
/// differences stay valid. The scalar readout is a weighted sum against a
/// fixed random tensor, which catches permuted or misplaced outputs that a
/// plain sum would miss.
pub fn primitive_suite(points: usize, h: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type G = GraphBase<f64>;
    type Tn = TensorBase<f64>;
    type Case = (
        &'static str,
        Vec<usize>,
        (f64, f64),
        Box<dyn Fn(&mut G, NodeId, &mut ChaCha8Rng) -> Result<NodeId>>,
    );

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tn {
        Tn::rand_uniform(shape, lo, hi, rng)
    }

    /// Weighted-sum readout with weights drawn from `rng`.
    fn read(g: &mut G, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let shape = g.value(y).shape().to_vec();
        let w = g.leaf(rt(rng, &shape, 0.1, 1.0))?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    let cases: Vec<Case> = vec![
        (
            "matmul/lhs",
            vec![3, 4],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let b = g.leaf(rt(rng, &[4, 2], -1.0, 1.0))?;
                let y = g.matmul(x, b)?;
                read(g, y, rng)
            }),
        ),
        (
            "matmul/rhs",
            vec![4, 2],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let a = g.leaf(rt(rng, &[3, 4], -1.0, 1.0))?;
                let y = g.matmul(a, x)?;
                read(g, y, rng)
            }),
        ),
        (
            "conv2d/input",
            vec![2, 2, 5, 5],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let w = g.leaf(rt(rng, &[3, 2, 3, 3], -0.5, 0.5))?;
                let y = g.conv2d(x, w, 1, 0)?;
                read(g, y, rng)
            }),
        ),
        (
            "conv2d/weight",
            vec![3, 2, 3, 3],
            (-0.5, 0.5),
            Box::new(|g, x, rng| {
                let xin = g.leaf(rt(rng, &[2, 2, 6, 6], -1.0, 1.0))?;
                let y = g.conv2d(xin, x, 2, 1)?;
                read(g, y, rng)
            }),
        ),
        (
            "conv_transpose2d/input",
            vec![1, 3, 4, 4],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let w = g.leaf(rt(rng, &[3, 2, 3, 3], -0.5, 0.5))?;
                let y = g.conv_transpose2d(x, w, 2, 1, 1)?;
                read(g, y, rng)
            }),
        ),
        (
            "conv_transpose2d/weight",
            vec![3, 2, 3, 3],
            (-0.5, 0.5),
            Box::new(|g, x, rng| {
                let xin = g.leaf(rt(rng, &[1, 3, 4, 4], -1.0, 1.0))?;
                let y = g.conv_transpose2d(xin, x, 2, 1, 1)?;
                read(g, y, rng)
            }),
        ),
        (
            "add/same",
            vec![3, 4],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let b = g.leaf(rt(rng, &[3, 4], -1.0, 1.0))?;
                let y = g.add(x, b)?;
                read(g, y, rng)
            }),
        ),
        (
            "add/bias-rows",
            vec![5],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let a = g.leaf(rt(rng, &[3, 5], -1.0, 1.0))?;
                let y = g.add(a, x)?;
                read(g, y, rng)
            }),
        ),
        (
            "add/bias-channels",
            vec![3],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let a = g.leaf(rt(rng, &[2, 3, 4, 4], -1.0, 1.0))?;
                let y = g.add(a, x)?;
                read(g, y, rng)
            }),
        ),
        (
            "mul",
            vec![4, 3],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let b = g.leaf(rt(rng, &[4, 3], -1.0, 1.0))?;
                let y = g.mul(x, b)?;
                read(g, y, rng)
            }),
        ),
        (
            "relu",
            vec![4, 4],
            (0.05, 1.0),
            Box::new(|g, x, rng| {
                // Alternate signs so both branches are hit while inputs stay
                // at least 0.05 away from the kink.
                let signs = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
                let s = g.leaf(Tn::from_vec(vec![4, 4], signs)?)?;
                let y0 = g.mul(x, s)?;
                let y = g.relu(y0)?;
                read(g, y, rng)
            }),
        ),
        (
            "tanh",
            vec![3, 3],
            (-2.0, 2.0),
            Box::new(|g, x, rng| {
                let y = g.tanh(x)?;
                read(g, y, rng)
            }),
        ),
        (
            "sigmoid",
            vec![3, 3],
            (-3.0, 3.0),
            Box::new(|g, x, rng| {
                let y = g.sigmoid(x)?;
                read(g, y, rng)
            }),
        ),
        (
            "softmax/rows",
            vec![3, 5],
            (-2.0, 2.0),
            Box::new(|g, x, rng| {
                let y = g.softmax(x, 1)?;
                read(g, y, rng)
            }),
        ),
        (
            "softmax/leading-axis",
            vec![4, 3],
            (-2.0, 2.0),
            Box::new(|g, x, rng| {
                let y = g.softmax(x, 0)?;
                read(g, y, rng)
            }),
        ),
        (
            "ln",
            vec![3, 3],
            (0.2, 3.0),
            Box::new(|g, x, rng| {
                let y = g.ln(x)?;
                read(g, y, rng)
            }),
        ),
        (
            "affine",
            vec![3, 3],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let y = g.affine(x, -0.25, 1.5)?;
                read(g, y, rng)
            }),
        ),
        (
            "clamp",
            vec![4, 4],
            (-0.8, 0.8),
            Box::new(|g, x, rng| {
                // Bounds sit outside the sampled interval, keeping every
                // point differentiable yet exercising the pass-through path.
                let y = g.clamp(x, -0.9, 0.9)?;
                read(g, y, rng)
            }),
        ),
        (
            "reshape",
            vec![2, 6],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let y = g.reshape(x, &[3, 4])?;
                read(g, y, rng)
            }),
        ),
        (
            "sum",
            vec![3, 4],
            (-1.0, 1.0),
            Box::new(|g, x, _| g.sum(x)),
        ),
        (
            "mean",
            vec![3, 4],
            (-1.0, 1.0),
            Box::new(|g, x, _| g.mean(x)),
        ),
        (
            "max_pool2d",
            vec![2, 2, 6, 6],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let y = g.max_pool2d(x, 2, 2)?;
                read(g, y, rng)
            }),
        ),
        (
            "composite/dense-softmax",
            vec![4, 6],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let w1 = g.leaf(rt(rng, &[6, 5], -0.6, 0.6))?;
                let b1 = g.leaf(rt(rng, &[5], -0.3, 0.3))?;
                let h1 = g.matmul(x, w1)?;
                let h2 = g.add(h1, b1)?;
                let h3 = g.tanh(h2)?;
                let w2 = g.leaf(rt(rng, &[5, 3], -0.6, 0.6))?;
                let h4 = g.matmul(h3, w2)?;
                let p = g.softmax(h4, 1)?;
                read(g, p, rng)
            }),
        ),
        (
            "composite/conv-pool-dense",
            vec![2, 1, 8, 8],
            (-1.0, 1.0),
            Box::new(|g, x, rng| {
                let w = g.leaf(rt(rng, &[3, 1, 3, 3], -0.5, 0.5))?;
                let c = g.conv2d(x, w, 1, 1)?;
                let a = g.tanh(c)?;
                let p = g.max_pool2d(a, 2, 2)?;
                let f = g.reshape(p, &[2, 3 * 4 * 4])?;
                let w2 = g.leaf(rt(rng, &[48, 3], -0.3, 0.3))?;
                let y = g.matmul(f, w2)?;
                read(g, y, rng)
            }),
        ),
    ];

    let mut out = Vec::new();
    for (ci, (name, shape, (lo, hi), build)) in cases.iter().enumerate() {
        let mut worst: Option<GradCheckReport> = None;
        for p in 0..points {
            let seed = (ci as u64) * 1000 + p as u64;
            let point = rt(&mut ChaCha8Rng::seed_from_u64(seed), shape, *lo, *hi);
            let report = grad_check(
                |g, x| build(g, x, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd)),
                &point,
                h,
                tol,
            )?;
            let replace = worst
                .as_ref()
                .map(|w| report.max_err > w.max_err)
                .unwrap_or(true);
            if replace {
                worst = Some(report);
            }
        }
        out.push((name.to_string(), worst.expect("at least one point")));
    }
    Ok(out)
}
