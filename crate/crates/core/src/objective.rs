//! Per-sample training objective and its gradient with respect to a task's
//! trainable tensors.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{AespError, Result};
use crate::iqkm::key_loss_and_grad;
use crate::losses::{
    classification_loss_grad, semantic_contrast_loss_grad, ContrastConfig, LossTerms, PairIndicator,
};
use crate::model::{assemble_input, TaskBundle, TaskParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub contrast: ContrastConfig,
    /// Softmax temperature of the key scores.
    pub temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            contrast: ContrastConfig::default(),
            temperature: 1.0,
        }
    }
}

/// A training sample with its frozen-path quantities precomputed. Both the
/// image tokens and the query feature are independent of every task's
/// parameters, so they are computed once per session.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub image_tokens: Array2<f64>,
    pub query: Array1<f64>,
    /// Index of the true class within the task's classes.
    pub class_index: usize,
}

/// Loss terms for one sample under `bundle`.
pub fn sample_loss(
    backbone: &Backbone,
    bundle: &TaskBundle,
    sample: &PreparedSample,
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    let class_token = backbone.class_token();
    let seq = assemble_input(class_token.view(), sample.image_tokens.view(), bundle)?;
    let out = backbone.forward(&seq, bundle)?;
    let (key, _) = key_loss_and_grad(
        sample.query.view(),
        &bundle.params.keys,
        sample.class_index,
        cfg.temperature,
    )?;
    let indicator = PairIndicator::new(sample.class_index, bundle.num_classes())?;
    let (contrast, _) = semantic_contrast_loss_grad(
        out.semantic_output_token.view(),
        bundle.class_semantics.view(),
        indicator,
        cfg.contrast,
    )?;
    let (ce, _) = classification_loss_grad(
        out.cls_feature.view(),
        &bundle.params.classifier,
        sample.class_index,
    )?;
    LossTerms::new(key, contrast, ce)
}

/// Loss terms and the gradient of the total loss for one sample. Groups that
/// are not trainable in `bundle` get a zero gradient.
pub fn sample_loss_grad(
    backbone: &Backbone,
    bundle: &TaskBundle,
    sample: &PreparedSample,
    cfg: &ObjectiveConfig,
) -> Result<(LossTerms, TaskParams)> {
    let class_token = backbone.class_token();
    let seq = assemble_input(class_token.view(), sample.image_tokens.view(), bundle)?;
    let layout = seq.layout();
    let (out, tape) = backbone.forward_with_tape(&seq, &bundle.params.adapters)?;

    let (key, key_grad) = key_loss_and_grad(
        sample.query.view(),
        &bundle.params.keys,
        sample.class_index,
        cfg.temperature,
    )?;
    let indicator = PairIndicator::new(sample.class_index, bundle.num_classes())?;
    let (contrast, d_sem) = semantic_contrast_loss_grad(
        out.semantic_output_token.view(),
        bundle.class_semantics.view(),
        indicator,
        cfg.contrast,
    )?;
    let (ce, ce_grad) = classification_loss_grad(
        out.cls_feature.view(),
        &bundle.params.classifier,
        sample.class_index,
    )?;
    let terms = LossTerms::new(key, contrast, ce)?;

    let mut d_out = Array2::zeros(out.all_tokens.raw_dim());
    d_out.row_mut(0).assign(&ce_grad.feature);
    d_out.row_mut(layout.semantic_index()).assign(&d_sem);
    let back = backbone.backward(&tape, d_out.view());

    let mut grad = bundle.params.zeros_like();
    grad.visual_prompt
        .assign(&back.tokens.slice(ndarray::s![layout.visual_range(), ..]));
    if bundle.semantic_prompt_trainable {
        grad.semantic_prompt.assign(&back.tokens.row(layout.semantic_index()));
    }
    // `assign` keeps the standard layout of the zero-initialized containers.
    grad.keys.assign(&key_grad);
    for (dst, src) in grad.adapters.iter_mut().zip(&back.adapters) {
        dst.down.assign(&src.down);
        dst.up.assign(&src.up);
    }
    grad.classifier.weight.assign(&ce_grad.weight);
    grad.classifier.bias.assign(&ce_grad.bias);
    Ok((terms, grad))
}

/// Mean loss terms and mean gradient over `samples`. Per-sample work runs in
/// parallel; the reduction is sequential in sample order so results do not
/// depend on scheduling.
pub fn batch_loss_grad(
    backbone: &Backbone,
    bundle: &TaskBundle,
    samples: &[&PreparedSample],
    cfg: &ObjectiveConfig,
) -> Result<(LossTerms, TaskParams)> {
    if samples.is_empty() {
        return Err(AespError::Protocol("empty training batch".into()));
    }
    let parts = samples
        .par_iter()
        .map(|s| sample_loss_grad(backbone, bundle, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = LossTerms::default();
    let mut grad = bundle.params.zeros_like();
    for (t, g) in &parts {
        terms.add(t);
        grad.add_scaled(g, 1.0);
    }
    let inv = 1.0 / samples.len() as f64;
    grad.scale(inv);
    Ok((terms.scaled(inv), grad))
}

/// Mean loss terms over `samples`, forward passes only.
pub fn batch_loss(
    backbone: &Backbone,
    bundle: &TaskBundle,
    samples: &[&PreparedSample],
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    if samples.is_empty() {
        return Err(AespError::Protocol("empty batch".into()));
    }
    let parts = samples
        .par_iter()
        .map(|s| sample_loss(backbone, bundle, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = LossTerms::default();
    parts.iter().for_each(|t| terms.add(t));
    Ok(terms.scaled(1.0 / samples.len() as f64))
}

/// Index of the largest classifier logit for `feature`.
pub fn predict_local(bundle: &TaskBundle, feature: ArrayView1<f64>) -> usize {
    crate::math::argmax(bundle.params.classifier.logits(feature).view())
}
