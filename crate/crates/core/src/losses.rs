//! Semantic contrast loss, classification loss and their sum.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AespError, Result};
use crate::math::{cosine, cosine_grad_wrt_first, softmax};
use crate::model::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    /// Weight on the negative-pair term.
    pub alpha: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { alpha: 0.3 }
    }
}

impl ContrastConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(ContrastConfig { alpha })
        } else {
            Err(AespError::Config(format!("alpha must be > 0, got {alpha}")))
        }
    }
}

/// One-hot marker of the positive class among a task's classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndicator {
    positive: usize,
    len: usize,
}

impl PairIndicator {
    pub fn new(positive: usize, len: usize) -> Result<Self> {
        if positive >= len {
            return Err(AespError::Protocol(format!(
                "positive class {positive} out of range for {len} classes"
            )));
        }
        Ok(PairIndicator { positive, len })
    }

    pub fn positive(&self) -> usize {
        self.positive
    }

    pub fn get(&self, i: usize) -> f64 {
        if i == self.positive {
            1.0
        } else {
            0.0
        }
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1/N) Σ_i [ŷ_i (1 − cos(s, e_i)) + α (1 − ŷ_i) |cos(s, e_i)|]` and its
/// gradient with respect to `s`. The `|·|` subgradient at 0 is 0.
pub fn semantic_contrast_loss_grad(
    sem_out: ArrayView1<f64>,
    class_embeddings: ArrayView2<f64>,
    indicator: PairIndicator,
    cfg: ContrastConfig,
) -> Result<(f64, Array1<f64>)> {
    let n = class_embeddings.nrows();
    if indicator.len != n {
        return Err(AespError::Protocol(format!(
            "indicator covers {} classes, embeddings {n}",
            indicator.len
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array1::zeros(sem_out.len());
    for (i, e) in class_embeddings.outer_iter().enumerate() {
        let c = cosine(sem_out, e).map_err(|_| {
            AespError::Degenerate(format!(
                "semantic output or class embedding {i} has zero norm"
            ))
        })?;
        let y = indicator.get(i);
        loss += y * (1.0 - c) + cfg.alpha * (1.0 - y) * c.abs();
        let d_c = -y + cfg.alpha * (1.0 - y) * sign_or_zero(c);
        if d_c != 0.0 {
            grad.scaled_add(d_c, &cosine_grad_wrt_first(sem_out, e)?);
        }
    }
    let inv = 1.0 / n as f64;
    Ok((loss * inv, grad * inv))
}

pub fn semantic_contrast_loss(
    sem_out: ArrayView1<f64>,
    class_embeddings: ArrayView2<f64>,
    indicator: PairIndicator,
    cfg: ContrastConfig,
) -> Result<f64> {
    semantic_contrast_loss_grad(sem_out, class_embeddings, indicator, cfg).map(|(l, _)| l)
}

/// Gradient of the classification loss.
#[derive(Debug, Clone)]
pub struct ClassifierGrad {
    pub feature: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Cross-entropy of the classifier logits against the true class, with gradients.
pub fn classification_loss_grad(
    cls_feature: ArrayView1<f64>,
    classifier: &Classifier,
    true_class_index: usize,
) -> Result<(f64, ClassifierGrad)> {
    let n = classifier.num_classes();
    if true_class_index >= n {
        return Err(AespError::Protocol(format!(
            "true class index {true_class_index} out of range for {n} classes"
        )));
    }
    let logits = classifier.logits(cls_feature);
    let p = softmax(logits.view(), 1.0);
    let loss = log_sum_exp(logits.view()) - logits[true_class_index];
    let mut d_logits = p;
    d_logits[true_class_index] -= 1.0;
    let weight = cls_feature
        .to_owned()
        .insert_axis(ndarray::Axis(1))
        .dot(&d_logits.view().insert_axis(ndarray::Axis(0)));
    let feature = classifier.weight.dot(&d_logits);
    Ok((
        loss,
        ClassifierGrad {
            feature,
            weight,
            bias: d_logits,
        },
    ))
}

pub fn classification_loss(
    cls_feature: ArrayView1<f64>,
    classifier: &Classifier,
    true_class_index: usize,
) -> Result<f64> {
    classification_loss_grad(cls_feature, classifier, true_class_index).map(|(l, _)| l)
}

fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample (or batch-mean) loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub key: f64,
    pub contrast: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(key: f64, contrast: f64, ce: f64) -> Result<Self> {
        Ok(LossTerms {
            key,
            contrast,
            ce,
            total: total_loss(key, contrast, ce)?,
        })
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.key += other.key;
        self.contrast += other.contrast;
        self.ce += other.ce;
        self.total += other.total;
    }

    pub fn scaled(self, s: f64) -> Self {
        LossTerms {
            key: self.key * s,
            contrast: self.contrast * s,
            ce: self.ce * s,
            total: self.total * s,
        }
    }
}

/// `L = L_k + L_con + L_ce`, unit weights.
pub fn total_loss(key: f64, contrast: f64, ce: f64) -> Result<f64> {
    for (name, v) in [("multi-key", key), ("semantic contrast", contrast), ("classification", ce)] {
        if !v.is_finite() {
            return Err(AespError::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(key + contrast + ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Unit vectors in the plane with prescribed cosines to e1.
    fn embeddings_with_cos(cos: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((cos.len(), 2));
        for (i, &c) in cos.iter().enumerate() {
            m[[i, 0]] = c;
            m[[i, 1]] = (1.0 - c * c).sqrt();
        }
        m
    }

    #[test]
    fn contrast_loss_examples() {
        let s = array![1.0, 0.0];
        let cfg = ContrastConfig::default();
        assert_eq!(cfg.alpha, 0.3);
        let ind = PairIndicator::new(0, 2).unwrap();
        let perfect = embeddings_with_cos(&[1.0, 0.0]);
        assert!(semantic_contrast_loss(s.view(), perfect.view(), ind, cfg).unwrap().abs() < 1e-15);
        // (1/2)(0.5 + 0.3 * 0.4)
        let e = embeddings_with_cos(&[0.5, -0.4]);
        let l = semantic_contrast_loss(s.view(), e.view(), ind, cfg).unwrap();
        assert!((l - 0.31).abs() < 1e-12, "{l}");
    }

    #[test]
    fn contrast_loss_rejects_zero_semantic_output() {
        let e = embeddings_with_cos(&[1.0, 0.0]);
        let ind = PairIndicator::new(0, 2).unwrap();
        assert!(matches!(
            semantic_contrast_loss(array![0.0, 0.0].view(), e.view(), ind, ContrastConfig::default()),
            Err(AespError::Degenerate(_))
        ));
        assert!(PairIndicator::new(2, 2).is_err());
        assert!(ContrastConfig::new(0.0).is_err());
    }

    #[test]
    fn contrast_gradient_matches_central_difference() {
        let s = array![0.3, -1.2, 0.8];
        let e = array![[1.0, 0.5, -0.2], [0.1, -0.9, 0.4], [-0.6, 0.2, 1.1]];
        let ind = PairIndicator::new(1, 3).unwrap();
        let cfg = ContrastConfig::default();
        let (_, g) = semantic_contrast_loss_grad(s.view(), e.view(), ind, cfg).unwrap();
        let eps = 1e-6;
        for j in 0..3 {
            let mut up = s.clone();
            let mut dn = s.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (semantic_contrast_loss(up.view(), e.view(), ind, cfg).unwrap()
                - semantic_contrast_loss(dn.view(), e.view(), ind, cfg).unwrap())
                / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn subgradient_at_zero_cosine_is_zero() {
        let s = array![1.0, 0.0];
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let ind = PairIndicator::new(0, 2).unwrap();
        let (l, g) = semantic_contrast_loss_grad(s.view(), e.view(), ind, ContrastConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn classification_examples() {
        let feature = array![1.0, 0.0];
        let uniform = Classifier::zeros(2, 20);
        let l = classification_loss(feature.view(), &uniform, 3).unwrap();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        // logits [2, 0]: ln(1 + e^-2)
        let c = Classifier {
            weight: array![[2.0, 0.0], [0.0, 0.0]],
            bias: array![0.0, 0.0],
        };
        let l = classification_loss(feature.view(), &c, 0).unwrap();
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);
        let confident = Classifier {
            weight: array![[200.0, 0.0], [0.0, 0.0]],
            bias: array![0.0, 0.0],
        };
        assert!(classification_loss(feature.view(), &confident, 0).unwrap() < 1e-80);
        assert!(matches!(
            classification_loss(feature.view(), &c, 2),
            Err(AespError::Protocol(_))
        ));
    }

    #[test]
    fn classification_gradient_matches_central_difference() {
        let f = array![0.4, -0.3, 1.2];
        let c = Classifier {
            weight: array![[0.2, -0.5], [1.0, 0.3], [-0.7, 0.6]],
            bias: array![0.1, -0.2],
        };
        let (_, g) = classification_loss_grad(f.view(), &c, 1).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut up = c.clone();
                let mut dn = c.clone();
                up.weight[[i, j]] += eps;
                dn.weight[[i, j]] -= eps;
                let fd = (classification_loss(f.view(), &up, 1).unwrap()
                    - classification_loss(f.view(), &dn, 1).unwrap())
                    / (2.0 * eps);
                assert!((fd - g.weight[[i, j]]).abs() < 1e-8);
            }
            let mut up = f.clone();
            let mut dn = f.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (classification_loss(up.view(), &c, 1).unwrap()
                - classification_loss(dn.view(), &c, 1).unwrap())
                / (2.0 * eps);
            assert!((fd - g.feature[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.1, 0.2, 0.3).unwrap(), 0.1 + 0.2 + 0.3);
        assert!((total_loss(0.1, 0.2, 0.3).unwrap() - 0.6).abs() < 1e-15);
        let err = total_loss(0.1, f64::NAN, 0.3).unwrap_err();
        assert!(matches!(&err, AespError::Numerical(m) if m.contains("semantic contrast")));
        assert!(total_loss(f64::INFINITY, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn contrast_loss_nonnegative_and_scale_invariant(
            s in prop::collection::vec(-3.0f64..3.0, 4),
            e in prop::collection::vec(-3.0f64..3.0, 12),
            pos in 0usize..3,
            a in 0.01f64..50.0,
            b in 0.01f64..50.0,
        ) {
            let s = Array1::from(s);
            let e = Array2::from_shape_vec((3, 4), e).unwrap();
            prop_assume!(s.dot(&s) > 1e-6);
            prop_assume!(e.outer_iter().all(|r| r.dot(&r) > 1e-6));
            let ind = PairIndicator::new(pos, 3).unwrap();
            let cfg = ContrastConfig::default();
            let l = semantic_contrast_loss(s.view(), e.view(), ind, cfg).unwrap();
            prop_assert!(l >= 0.0);
            let l2 = semantic_contrast_loss((&s * a).view(), (&e * b).view(), ind, cfg).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }
    }
}
