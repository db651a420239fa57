//! Central-difference oracles for gradients and Hessians.
//!
//! These are the independent reference every hand-written or tape-derived
//! gradient in the crate is checked against. They know nothing about the
//! tape: they only need a scalar function (or a gradient function, for
//! Hessians) to probe, and they always probe in `f64`.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient: `(f(x + h e_i) - f(x - h e_i)) / (2h)` per
/// element. `f` must be deterministic; it is called twice per element.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central-difference Hessian from a gradient function:
/// `H[i][j] = (g_j(x + h e_i) - g_j(x - h e_i)) / (2h)`.
pub fn finite_diff_hessian(
    grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    at: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = at.len();
    let mut probe = at.to_vec();
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = grad(&probe)?;
        probe[i] = orig - h;
        let down = grad(&probe)?;
        probe[i] = orig;
        for j in 0..n {
            hess[i][j] = (up[j] - down[j]) / (2.0 * h);
        }
    }
    Ok(hess)
}

/// Gradient-check error measure: largest absolute element difference,
/// normalized by the largest reference magnitude (floored so an all-zero
/// reference compares absolute differences against 1).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "max_rel_err shape mismatch");
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_diff = max_diff.max((a - n).abs());
        max_ref = max_ref.max(n.abs());
    }
    max_diff / max_ref.max(1.0)
}
