//! Central-difference gradient verification in `f64`.

use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `analytic` against `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate. The relative error per coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`; the check passes when the worst one is at
/// most `tolerance`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::invalid(format!("step {h} outside [1e-6, 1e-2]")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} inputs but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }
    let mut probe = x.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f is not finite around coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst.0 || i == 0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= tolerance,
    })
}
