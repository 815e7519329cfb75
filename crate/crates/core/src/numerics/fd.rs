use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]. Central differences at
/// `eps = 1e-5` carry roughly 1e-11 absolute error, so gradients smaller
/// than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for j in 0..theta.len() {
        let orig = theta[j];
        theta[j] = orig + eps;
        let up = f(&theta);
        theta[j] = orig - eps;
        let down = f(&theta);
        theta[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "objective is non-finite when perturbing coordinate {j} ({up}, {down})"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let r = finite_diff_grad(|t| if t[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Oracle(_))));
        assert!(matches!(finite_diff_grad(|_| 0.0, &[0.0], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
