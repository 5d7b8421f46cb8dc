//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient returned by `f` with central differences
/// of its value and returns the worst relative error.
///
/// `f` maps a point to `(value, gradient)`; it must be deterministic.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    fd_check_with(f, x, h).map(|r| r.max_rel_err)
}

pub fn fd_check_with<F>(mut f: F, x: &Tensor, h: f64) -> Result<FdReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fd_check: f(x) = {value}")));
    }
    if analytic.len() != x.numel() {
        return Err(Error::Dimension {
            op: "fd_check",
            lhs: x.shape().to_vec(),
            rhs: vec![analytic.len()],
        });
    }
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "fd_check: f is not finite near coordinate {i}"
            )));
        }
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(FdReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
