//! Central finite differences.
//!
//! This is the reference gradient that every analytic backward pass in the
//! crate is tested against. It must stay independent of those backward
//! passes: it only ever calls the scalar function it is handed.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default step for the central difference. With f64 and O(1) inputs this
/// balances truncation against cancellation at roughly 1e-10 accuracy.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`: g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidInput("finite difference step must be > 0"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite difference probe"));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, floor).
/// The floor keeps near-zero gradients from failing on rounding noise.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Worst relative error across two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y, floor))
        .fold(0.0, f64::max)
}
