use crate::report::OracleReport;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// Compares `analytic` with central differences of `f`. The relative error
/// is normalized by the largest gradient magnitude, so entries near zero do
/// not dominate.
pub fn gradient_check(
    name: &str,
    analytic: &[f64],
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
    tolerance: f64,
) -> OracleReport {
    let numeric = central_difference(f, x, eps);
    let mut scale: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for i in 0..numeric.len() {
        scale = scale.max(numeric[i].abs()).max(analytic.get(i).copied().unwrap_or(0.0).abs());
        abs = abs.max((numeric[i] - analytic.get(i).copied().unwrap_or(f64::NAN)).abs());
    }
    if analytic.len() != numeric.len() || abs.is_nan() {
        abs = f64::INFINITY;
    }
    let rel = if scale > 0.0 { abs / scale } else { abs };
    OracleReport {
        name: name.to_string(),
        max_abs_error: abs,
        max_rel_error: rel,
        tolerance,
        pass: rel <= tolerance,
    }
}
