/// `u·v / (|u| |v|)`, `None` for a zero vector.
pub fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if uu == 0.0 || vv == 0.0 {
        None
    } else {
        Some(dot / (uu.sqrt() * vv.sqrt()))
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut out = Vec::with_capacity(x.len());
    let mut sum = 0.0;
    for &v in x {
        let e = (v - max).exp();
        out.push(e);
        sum += e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// `−ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].ln()
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Cross-entropy of softmaxed query-key cosines.
pub fn multi_key_loss(raw_cosines: &[f64], target: usize, temperature: f64) -> f64 {
    let scaled: Vec<f64> = raw_cosines.iter().map(|c| c / temperature).collect();
    cross_entropy(&scaled, target)
}

/// `(1/N) Σ_i [y_i (1 − c_i) + α (1 − y_i) |c_i|]` from per-class cosines.
pub fn contrast_loss(cosines: &[f64], target: usize, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (i, &c) in cosines.iter().enumerate() {
        if i == target {
            total += 1.0 - c;
        } else {
            total += alpha * c.abs();
        }
    }
    total / cosines.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((contrast_loss(&[0.5, -0.4], 0, 0.3) - 0.31).abs() < 1e-15);
        assert_eq!(contrast_loss(&[1.0, 0.0], 0, 0.3), 0.0);
        assert!((cross_entropy(&[0.0; 20], 3) - 20f64.ln()).abs() < 1e-14);
        assert!((cross_entropy(&[2.0, 0.0], 0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.7, 0.2, 0.1]) - 0.8018185525433373).abs() < 1e-12);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[2.0, 1.0]), None);
    }
}
