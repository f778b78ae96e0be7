//! Numeric kernels behind the graph ops.
//!
//! Plain loops over row-major buffers. Shapes are validated by the caller;
//! kernels assume consistent dimensions.

use crate::scalar::Scalar;

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn matmul_bwd<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_a.then(|| {
        // da = g . b^T
        let mut da = vec![T::zero(); m * k];
        for i in 0..m {
            for p in 0..k {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += g[i * n + j] * b[p * n + j];
                }
                da[i * k + p] = acc;
            }
        }
        da
    });
    let db = need_b.then(|| {
        // db = a^T . g
        let mut db = vec![T::zero(); k * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let grow = &g[i * n..(i + 1) * n];
                let drow = &mut db[p * n..(p + 1) * n];
                for j in 0..n {
                    drow[j] += av * grow[j];
                }
            }
        }
        db
    });
    (da, db)
}

/// Output spatial size of a strided convolution, or None when the window
/// does not fit.
pub(crate) fn conv_out(sz: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = sz + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub(crate) fn conv_t_out(sz: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let grown = (sz - 1) * stride + k + out_pad;
    if grown < 2 * pad + 1 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// x: [n, ci, h, w], w: [co, ci, kh, kw] -> [n, co, ho, wo]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d<T: Scalar>(
    x: &[T],
    w: &[T],
    dims: (usize, usize, usize, usize),
    kdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let (n, ci, h, wd) = dims;
    let (co, kh, kw) = kdims;
    let mut out = vec![T::zero(); n * co * ho * wo];
    for nn in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for icc in 0..ci {
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((nn * ci + icc) * h + ih as usize) * wd + iw as usize;
                                let wi = ((oc * ci + icc) * kh + ki) * kw + kj;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((nn * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    dims: (usize, usize, usize, usize),
    kdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (n, ci, h, wd) = dims;
    let (co, kh, kw) = kdims;
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    for nn in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g[((nn * co + oc) * ho + oh) * wo + ow];
                    if gv == T::zero() {
                        continue;
                    }
                    for icc in 0..ci {
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((nn * ci + icc) * h + ih as usize) * wd + iw as usize;
                                let wi = ((oc * ci + icc) * kh + ki) * kw + kj;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += gv * w[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// x: [n, ci, h, w], w: [ci, co, kh, kw] -> [n, co, ho, wo], scatter form.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t2d<T: Scalar>(
    x: &[T],
    w: &[T],
    dims: (usize, usize, usize, usize),
    kdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let (n, ci, h, wd) = dims;
    let (co, kh, kw) = kdims;
    let mut out = vec![T::zero(); n * co * ho * wo];
    for nn in 0..n {
        for icc in 0..ci {
            for ih in 0..h {
                for iw in 0..wd {
                    let xv = x[((nn * ci + icc) * h + ih) * wd + iw];
                    if xv == T::zero() {
                        continue;
                    }
                    for oc in 0..co {
                        for ki in 0..kh {
                            let oh = (ih * stride + ki) as isize - pad as isize;
                            if oh < 0 || oh >= ho as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ow = (iw * stride + kj) as isize - pad as isize;
                                if ow < 0 || ow >= wo as isize {
                                    continue;
                                }
                                let oi = ((nn * co + oc) * ho + oh as usize) * wo + ow as usize;
                                let wi = ((icc * co + oc) * kh + ki) * kw + kj;
                                out[oi] += xv * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t2d_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    dims: (usize, usize, usize, usize),
    kdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (n, ci, h, wd) = dims;
    let (co, kh, kw) = kdims;
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    for nn in 0..n {
        for icc in 0..ci {
            for ih in 0..h {
                for iw in 0..wd {
                    let xi = ((nn * ci + icc) * h + ih) * wd + iw;
                    let xv = x[xi];
                    let mut acc = T::zero();
                    for oc in 0..co {
                        for ki in 0..kh {
                            let oh = (ih * stride + ki) as isize - pad as isize;
                            if oh < 0 || oh >= ho as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ow = (iw * stride + kj) as isize - pad as isize;
                                if ow < 0 || ow >= wo as isize {
                                    continue;
                                }
                                let gv = g[((nn * co + oc) * ho + oh as usize) * wo + ow as usize];
                                let wi = ((icc * co + oc) * kh + ki) * kw + kj;
                                acc += gv * w[wi];
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += gv * xv;
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Returns pooled values plus the flat input index of each maximum.
/// Ties keep the first (lowest index) candidate.
pub(crate) fn max_pool2d<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = dims;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut idx = vec![0usize; out.len()];
    for nn in 0..n {
        for cc in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ki in 0..k {
                        for kj in 0..k {
                            let ih = oh * stride + ki;
                            let iw = ow * stride + kj;
                            debug_assert!(ih < h && iw < w);
                            let xi = ((nn * c + cc) * h + ih) * w + iw;
                            if x[xi] > best {
                                best = x[xi];
                                best_i = xi;
                            }
                        }
                    }
                    let o = ((nn * c + cc) * ho + oh) * wo + ow;
                    out[o] = best;
                    idx[o] = best_i;
                }
            }
        }
    }
    (out, idx)
}

/// Softmax along `axis`, numerically stabilized by max subtraction.
pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let mut mx = T::neg_infinity();
            for a in 0..axis_len {
                mx = mx.max(x[at(a)]);
            }
            let mut denom = T::zero();
            for a in 0..axis_len {
                let e = (x[at(a)] - mx).exp();
                out[at(a)] = e;
                denom += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= denom;
            }
        }
    }
    out
}

pub(crate) fn softmax_bwd<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..axis_len {
                dot += g[at(a)] * y[at(a)];
            }
            for a in 0..axis_len {
                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    dx
}
