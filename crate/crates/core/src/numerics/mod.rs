//! Dense linear algebra, seeded randomness, stable softmax and a
//! finite-difference gradient checker.
//!
//! Everything is `f64`. Reductions run single-threaded in index order so
//! results are bitwise reproducible.

mod matrix;
mod rng;

pub use matrix::{dot, norm, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Default central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Relative error accepted by gradient checks.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// `ln Σ exp(v)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(crate::error::shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine input".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Compares an analytic gradient with central differences of `loss`.
///
/// Returns `max_i |g_i - fd_i| / max(1, |g_i|)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(crate::error::shape(format!(
            "{} params but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(h > 0.0) {
        return Err(crate::error::invalid("finite-difference step must be positive"));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at probe of parameter {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
