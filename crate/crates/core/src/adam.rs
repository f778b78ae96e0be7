//! Adam optimizer over named parameter sets.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use std::collections::BTreeMap;

/// Parameters addressed by name, iterated in insertion order.
pub type ParamMap<T> = indexmap::IndexMap<String, TensorBase<T>>;

/// Adam state: per-parameter first and second moment estimates plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamBase<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step_count: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamBase<T> {
    pub fn new(lr: f64) -> Self {
        AdamBase {
            lr: T::from_f64_lit(lr),
            beta1: T::from_f64_lit(0.9),
            beta2: T::from_f64_lit(0.999),
            eps: T::from_f64_lit(1e-8),
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = T::from_f64_lit(beta1);
        self.beta2 = T::from_f64_lit(beta2);
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr.to_f64_lit()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64_lit(lr);
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter that requires a gradient, then
    /// clears the consumed gradients. Parameters with `requires_grad` unset
    /// are skipped; a trainable parameter without a gradient is an error.
    pub fn step(&mut self, params: &mut ParamMap<T>) -> Result<()> {
        let t = self.step_count + 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t as i32);
        let bc2 = one - self.beta2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => return Err(Error::MissingGrad(name.clone())),
            };
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let data = p.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] - self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.clear_grad();
        }
        self.step_count = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: f64) -> ParamMap<f64> {
        let mut t = TensorBase::scalar(v).with_grad();
        t.set_grad(Some(vec![g]));
        let mut p = ParamMap::new();
        p.insert("w".into(), t);
        p
    }

    #[test]
    fn first_step_moves_by_almost_lr() {
        // With g=1 the bias-corrected moments are exactly 1, so the update is
        // lr / (1 + eps).
        let mut params = one_param(0.0, 1.0);
        let mut opt = AdamBase::new(0.1);
        opt.step(&mut params).unwrap();
        let w = params["w"].data()[0];
        assert!((w + 0.1).abs() < 1e-8, "w = {w}");
        assert_eq!(opt.step_count(), 1);
        assert!(params["w"].grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_params_bit_identical() {
        let mut params = one_param(1.25, 0.0);
        let mut opt = AdamBase::new(0.1);
        opt.step(&mut params).unwrap();
        assert_eq!(params["w"].data()[0], 1.25);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut params = ParamMap::new();
        params.insert("conv.w".to_string(), TensorBase::<f64>::zeros(&[2]).with_grad());
        let mut opt = AdamBase::new(0.01);
        let err = opt.step(&mut params).unwrap_err();
        assert!(err.to_string().contains("conv.w"));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut params = one_param(3.0, 1.0);
        params["w"].set_requires_grad(false);
        let mut opt = AdamBase::new(0.1);
        opt.step(&mut params).unwrap();
        assert_eq!(params["w"].data()[0], 3.0);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (w - 3)^2 by hand-fed gradients.
        let mut params = one_param(0.0, 0.0);
        let mut opt = AdamBase::new(0.05);
        for _ in 0..2000 {
            let w = params["w"].data()[0];
            params["w"].set_grad(Some(vec![2.0 * (w - 3.0)]));
            opt.step(&mut params).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 1e-3);
    }
}
