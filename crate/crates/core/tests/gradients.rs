//! Finite-difference verification of every differentiable primitive.

use revcal_core::gradcheck::{grad_check, primitive_suite};
use revcal_core::graph::GraphBase;
use revcal_core::tensor::TensorBase;

#[test]
fn primitives_match_central_differences() {
    let reports = primitive_suite(5, 1e-5, 1e-4).unwrap();
    for (name, r) in &reports {
        assert!(
            r.pass,
            "{name}: max err {} at coordinate {}",
            r.max_err, r.worst_index
        );
    }
    assert!(reports.len() >= 20, "suite should cover every primitive");
}

#[test]
fn gradients_check_at_f32_with_coarser_step() {
    // f32 loses roughly half the significant digits, so the step and the
    // tolerance are widened accordingly.
    let point = TensorBase::from_vec(vec![2, 3], vec![0.3f32, -0.8, 1.2, 0.05, -0.4, 0.9]).unwrap();
    let report = grad_check(
        |g: &mut GraphBase<f32>, x| {
            let t = g.tanh(x)?;
            g.mean(t)
        },
        &point,
        1e-2,
        1e-2,
    )
    .unwrap();
    assert!(report.pass, "max err {}", report.max_err);
}

#[test]
fn constant_function_reports_zero_error() {
    // Both gradients vanish; the comparison falls back to absolute error.
    let point = TensorBase::from_vec(vec![3], vec![0.1f64, 0.2, 0.3]).unwrap();
    let report = grad_check(
        |g, x| {
            let z = g.affine(x, 0.0, 5.0)?;
            g.sum(z)
        },
        &point,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass);
    assert!(report.max_err < 1e-9);
}
