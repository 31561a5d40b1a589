//! Central finite-difference gradient checking.
//!
//! These helpers only ever evaluate the forward pass, so they serve as an
//! oracle that is independent of the backward rules under test.

use crate::tensor::{grad, no_grad, Tensor};

/// Central-difference gradient of `f` with respect to every element of
/// `inputs[which]`, all other inputs held fixed.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], which: usize, eps: f64) -> Vec<f64>
where
    F: Fn(&[Tensor]) -> f64,
{
    let base = inputs[which].to_vec();
    let shape = inputs[which].shape().to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = inputs.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        probe[which] = Tensor::from_vec(plus, &shape);
        let fp = no_grad(|| f(&probe));
        let mut minus = base.clone();
        minus[i] -= eps;
        probe[which] = Tensor::from_vec(minus, &shape);
        let fm = no_grad(|| f(&probe));
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// `max |a - n| / max(max |n|, floor)`: error relative to the gradient's
/// overall scale, which stays meaningful when individual entries are ~0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences for each input; returns the worst relative error.
pub fn max_gradient_error<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach_requiring_grad()).collect();
    let out = f(&leaves);
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&out, &refs, false);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(|xs| f(xs).item(), inputs, i, eps);
        worst = worst.max(relative_error(a.data(), &numeric));
    }
    worst
}
