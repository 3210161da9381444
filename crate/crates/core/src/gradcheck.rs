//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Offset added to `|g_i|` in the relative error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max_i |fd_i - g_i| / (|g_i| + 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub worst_numeric: f64,
    pub worst_analytic: f64,
    pub coordinates: usize,
}

/// Compare `analytic` against central differences of `f` around `params`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut point = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_numeric: 0.0,
        worst_analytic: 0.0,
        coordinates: params.len(),
    };
    for i in 0..params.len() {
        point[i] = params[i] + h;
        let plus = f(&point)?;
        point[i] = params[i] - h;
        let minus = f(&point)?;
        point[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let g = analytic[i];
        let err = (numeric - g).abs() / (g.abs() + REL_ERROR_FLOOR);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_numeric = numeric;
            report.worst_analytic = g;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[f64]) -> Result<f64> {
        Ok(p.iter()
            .enumerate()
            .map(|(i, x)| (i as f64 + 1.0) * x * x)
            .sum())
    }

    fn quad_grad(p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(i, x)| 2.0 * (i as f64 + 1.0) * x)
            .collect()
    }

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 2.5];
        for h in [1e-3, 1e-5] {
            let r = finite_difference_check(quad, &p, &quad_grad(&p), h).unwrap();
            assert!(r.max_rel_error < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn negated_adjoint_reports_two() {
        let p = [0.3, -1.2, 2.5];
        let wrong: Vec<f64> = quad_grad(&p).iter().map(|g| -g).collect();
        let r = finite_difference_check(quad, &p, &wrong, 1e-5).unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let f = |p: &[f64]| Ok(if p[1] > 0.5 { f64::NAN } else { p[0] });
        let err = finite_difference_check(f, &[0.0, 0.5], &[1.0, 0.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(matches!(
            finite_difference_check(quad, &[1.0], &[2.0], 0.0),
            Err(Error::Contract(_))
        ));
    }
}
