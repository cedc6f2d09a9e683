//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Analytic value at the worst index.
    pub analytic: f64,
    /// Numeric value at the worst index.
    pub numeric: f64,
    pub passed: bool,
}

/// Central-difference gradient estimate of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / (2 h)` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: FnMut(&DenseArray) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!("step h must be > 0, got {h}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite at coordinate {i}"
            )));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    DenseArray::from_vec(x.dims().to_vec(), grad)
}

/// Element-wise relative comparison:
/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check(analytic: &DenseArray, numeric: &DenseArray, tol: f64) -> Result<GradReport> {
    if !analytic.same_dims(numeric) {
        return Err(Error::DimMismatch(format!(
            "grad_check: {:?} vs {:?}",
            analytic.dims(),
            numeric.dims()
        )));
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradReport {
        max_rel_error,
        worst_index,
        analytic: analytic.data()[worst_index],
        numeric: numeric.data()[worst_index],
        passed: max_rel_error <= tol,
    })
}
