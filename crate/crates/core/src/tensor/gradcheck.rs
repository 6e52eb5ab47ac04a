//! Finite-difference gradient oracle.
//!
//! Central differences over a flat parameter vector, sharing no code with the
//! tape. Tests treat this as ground truth when validating backward rules.

use crate::tensor::TensorError;

/// Estimates d f / d params[i] for every coordinate by evaluating
/// `f(params ± eps·e_i)`. `eps` must lie in (0, 0.01]; each evaluation must
/// be finite.
pub fn finite_difference_grad<F>(
    mut f: F,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: FnMut(&[f64]) -> Result<f64, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::BadEpsilon { eps });
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let hi = f(&work)?;
        work[i] = orig - eps;
        let lo = f(&work)?;
        work[i] = orig;
        let slope = (hi - lo) / (2.0 * eps);
        if !slope.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_grad",
                index: i,
                value: slope,
            });
        }
        grad.push(slope);
    }
    Ok(grad)
}

/// Largest elementwise relative error between an analytic gradient and a
/// numeric estimate. The denominator is floored at 1e-6 so that agreeing
/// near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_rel_err_with_floor(analytic, numeric, 1e-6)
}

/// Like [`max_rel_err`] with an explicit denominator floor. Central
/// differences carry an absolute noise floor around `|f| * ulp / eps`, so
/// coordinates whose true gradient sits near that level cannot be certified
/// in relative terms at all; flooring the denominator at `floor` judges
/// them absolutely instead (pass means `|a - n| < tol * floor`). Deep
/// composite losses need a floor well above the noise, around 1e-4 for a
/// loss of magnitude ~10 at eps 1e-5.
pub fn max_rel_err_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_gradient_of_a_quadratic() {
        // f(x) = x0^2 + 3 x0 x1, grad = [2 x0 + 3 x1, 3 x0]
        let f = |p: &[f64]| Ok(p[0] * p[0] + 3.0 * p[0] * p[1]);
        let at = [1.5, -2.0];
        let g = finite_difference_grad(f, &at, 1e-5).unwrap();
        let want = [2.0 * 1.5 + 3.0 * -2.0, 3.0 * 1.5];
        assert!(max_rel_err(&want, &g) < 1e-9, "{g:?}");
    }

    #[test]
    fn rejects_eps_outside_range() {
        let f = |p: &[f64]| Ok(p[0]);
        assert!(finite_difference_grad(f, &[1.0], 0.0).is_err());
        assert!(finite_difference_grad(f, &[1.0], 0.5).is_err());
    }

    #[test]
    fn reports_offending_coordinate_on_non_finite_f() {
        // finite at the base point, NaN whenever coordinate 1 moves
        let f = |p: &[f64]| Ok(if p[1] == 0.0 { p[0] } else { f64::NAN });
        let err = finite_difference_grad(f, &[1.0, 0.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }
}
