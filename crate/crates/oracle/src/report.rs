use std::fmt;

/// Outcome of comparing a computed quantity with its oracle value.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_error: f64,
    /// `max |a − e| / max(|e|, 1e-12)`, elementwise.
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Whether the checked error is within `tolerance`.
    pub pass: bool,
}

impl OracleReport {
    /// Elementwise comparison judged on absolute error.
    pub fn absolute(name: &str, expected: &[f64], actual: &[f64], tolerance: f64) -> Self {
        let (abs, rel) = errors(expected, actual);
        OracleReport {
            name: name.to_string(),
            max_abs_error: abs,
            max_rel_error: rel,
            tolerance,
            pass: abs <= tolerance,
        }
    }

    /// Elementwise comparison judged on relative error.
    pub fn relative(name: &str, expected: &[f64], actual: &[f64], tolerance: f64) -> Self {
        let (abs, rel) = errors(expected, actual);
        OracleReport {
            name: name.to_string(),
            max_abs_error: abs,
            max_rel_error: rel,
            tolerance,
            pass: rel <= tolerance,
        }
    }
}

fn errors(expected: &[f64], actual: &[f64]) -> (f64, f64) {
    if expected.len() != actual.len() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let mut abs: f64 = 0.0;
    let mut rel: f64 = 0.0;
    for i in 0..expected.len() {
        let e = (actual[i] - expected[i]).abs();
        if e.is_nan() {
            return (f64::INFINITY, f64::INFINITY);
        }
        abs = abs.max(e);
        rel = rel.max(e / expected[i].abs().max(1e-12));
    }
    (abs, rel)
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "oracle={} max_abs={:.3e} max_rel={:.3e} tol={:.1e} pass={}",
            self.name, self.max_abs_error, self.max_rel_error, self.tolerance, self.pass
        )
    }
}
