//! Vector helpers shared by the selector, losses and backbone.

use ndarray::{Array1, ArrayView1};

use crate::error::{AespError, Result};

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
///
/// Zero-norm inputs are rejected rather than producing NaN.
pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AespError::Config(format!(
            "cosine: dimension mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(AespError::Degenerate(format!(
            "cosine of vector with norm {} and {}",
            nu, nv
        )));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to `u`: `v/(‖u‖‖v‖) − cos·u/‖u‖²`.
pub fn cosine_grad_wrt_first(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(AespError::Degenerate("cosine gradient at zero vector".into()));
    }
    let c = u.dot(&v) / (nu * nv);
    Ok(&v / (nu * nv) - &u * (c / (nu * nu)))
}

/// Numerically stable softmax with temperature.
pub fn softmax(logits: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let mut out = logits.mapv(|x| (x / temperature - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn max(v: ArrayView1<f64>) -> f64 {
    v.fold(f64::NEG_INFINITY, |m, &x| m.max(x))
}
