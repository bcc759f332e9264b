use super::Real;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares `analytic[i]` against the central difference
/// `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps` for every `i` in `indices`.
///
/// The error for one entry is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn gradient_check<T: Real>(
    params: &[T],
    analytic: &[T],
    indices: &[usize],
    eps: f64,
    tol: f64,
    abs_floor: f64,
    mut f: impl FnMut(&[T]) -> f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return config_err(format!("finite-difference step must be positive, got {eps}"));
    }
    if params.len() != analytic.len() {
        return config_err("analytic gradient length differs from parameter count");
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= params.len()) {
        return config_err(format!("parameter index {i} out of range"));
    }
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &i in indices {
        let orig = work[i];
        work[i] = T::lit(orig.as_f64() + eps);
        let plus = f(&work);
        work[i] = T::lit(orig.as_f64() - eps);
        let minus = f(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(abs_floor);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked: indices.len(),
        passed: max_rel <= tol,
    })
}
