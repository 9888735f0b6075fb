//! Central-difference gradient checks.

use serde::Serialize;

use crate::error::{AespError, Result};
use crate::model::TaskParams;

/// Anything exposing named flat parameter groups.
pub trait Parameters: Clone {
    fn groups(&self) -> Vec<(String, &[f64])>;
    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl Parameters for TaskParams {
    fn groups(&self) -> Vec<(String, &[f64])> {
        TaskParams::groups(self)
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        TaskParams::groups_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)` over
    /// the group; zero when both gradients vanish.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Compares the analytic gradient from `loss_grad` with central differences
/// of its loss, for every group accepted by `include`.
pub fn finite_difference_check<P, F>(
    loss_grad: F,
    params: &P,
    epsilon: f64,
    include: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<(f64, P)>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(AespError::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let finite = |l: f64, at: &str| {
        if l.is_finite() {
            Ok(l)
        } else {
            Err(AespError::Numerical(format!("loss is {l} {at}")))
        }
    };
    let (l0, analytic) = loss_grad(params)?;
    finite(l0, "at the base point")?;

    let mut probe = params.clone();
    let mut groups = Vec::new();
    let analytic_groups = analytic.groups();
    for (gi, (name, grad)) in analytic_groups.iter().enumerate() {
        if !include(name) {
            continue;
        }
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.groups()[gi].1[j];
            probe.groups_mut()[gi].1[j] = orig + epsilon;
            let plus = finite(loss_grad(&probe)?.0, &format!("perturbing {name}[{j}]"))?;
            probe.groups_mut()[gi].1[j] = orig - epsilon;
            let minus = finite(loss_grad(&probe)?.0, &format!("perturbing {name}[{j}]"))?;
            probe.groups_mut()[gi].1[j] = orig;
            *slot = (plus - minus) / (2.0 * epsilon);
        }
        let max_abs_error = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = grad
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        groups.push(GroupCheck {
            name: name.clone(),
            entries: grad.len(),
            max_abs_error,
            rel_error: if scale > 0.0 { max_abs_error / scale } else { 0.0 },
        });
    }
    Ok(GradCheckReport { epsilon, groups })
}
