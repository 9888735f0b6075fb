//! Integrated query-key matching.
//!
//! Three per-task reductions of a frozen query feature decide which task's
//! bundle handles an input: the largest key cosine, the lowest entropy of the
//! softmaxed key cosines, and the largest prototype probability. A majority
//! vote combines them; if all three disagree the key-cosine choice wins.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{AespError, Result};
use crate::math::{cosine, cosine_grad_wrt_first, max, softmax};
use crate::model::{PromptPool, TaskBundle};

/// Cosine scores of one query against one task's keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub raw: Array1<f64>,
    pub softmaxed: Array1<f64>,
}

/// Which strategies decide the selected task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IqkmMode {
    #[default]
    Full,
    MultiKeyOnly,
    EntropyOnly,
    PrototypeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub mode: IqkmMode,
    pub temperature: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            mode: IqkmMode::Full,
            temperature: 1.0,
        }
    }
}

/// Outcome of selecting a task for one query. Task ids are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub query_id: usize,
    pub ground_truth_task: Option<usize>,
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
    pub chosen: usize,
}

fn cosine_scores(q: ArrayView1<f64>, rows: &Array2<f64>, what: &str, task: usize) -> Result<Array1<f64>> {
    rows.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            cosine(q, row).map_err(|e| match e {
                AespError::Degenerate(_) => AespError::Degenerate(format!(
                    "task {task}: {what} for class index {i} (or the query) has zero norm"
                )),
                other => other,
            })
        })
        .collect()
}

/// `raw[i] = cos(q, K_i)`, `softmaxed = softmax(raw / temperature)`.
pub fn score_against_task(q: ArrayView1<f64>, bundle: &TaskBundle, temperature: f64) -> Result<ScoreVector> {
    let raw = cosine_scores(q, &bundle.params.keys, "key", bundle.task_id)?;
    let softmaxed = softmax(raw.view(), temperature);
    Ok(ScoreVector { raw, softmaxed })
}

/// Cross-entropy of the softmaxed scores against the true class.
pub fn multi_key_loss(score: &ScoreVector, true_class_index: usize) -> Result<f64> {
    let p = score.softmaxed.get(true_class_index).ok_or_else(|| {
        AespError::Protocol(format!(
            "true class index {true_class_index} out of range for {} keys",
            score.softmaxed.len()
        ))
    })?;
    Ok(-p.ln())
}

/// `H(ℓ) = −Σ ℓ_i ln ℓ_i` with `0·ln 0 = 0`.
pub fn entropy(distribution: ArrayView1<f64>) -> f64 {
    -distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `ζ_c = softmax_c cos(q, prototype_c)`.
pub fn prototype_distribution(q: ArrayView1<f64>, bundle: &TaskBundle, temperature: f64) -> Result<Array1<f64>> {
    let protos = bundle.prototypes.as_ref().ok_or_else(|| {
        AespError::Protocol(format!("task {} has no prototypes (not finalized)", bundle.task_id))
    })?;
    let sims = cosine_scores(q, protos, "prototype", bundle.task_id)?;
    Ok(softmax(sims.view(), temperature))
}

/// Majority of three; when all differ, the first.
pub fn vote(p1: usize, p2: usize, p3: usize) -> usize {
    if p2 == p3 {
        p2
    } else {
        p1
    }
}

/// Per-task reductions used by the three strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvidence {
    pub task_id: usize,
    pub max_score: f64,
    pub entropy: f64,
    pub max_prototype_prob: f64,
}

pub fn task_evidence(q: ArrayView1<f64>, bundle: &TaskBundle, temperature: f64) -> Result<TaskEvidence> {
    let score = score_against_task(q, bundle, temperature)?;
    let zeta = prototype_distribution(q, bundle, temperature)?;
    Ok(TaskEvidence {
        task_id: bundle.task_id,
        max_score: max(score.raw.view()),
        entropy: entropy(score.softmaxed.view()),
        max_prototype_prob: max(zeta.view()),
    })
}

/// Picks the task whose bundle should process `q`. Ties go to the lowest task id.
pub fn select_task(q: ArrayView1<f64>, pool: &PromptPool, cfg: &SelectorConfig) -> Result<SelectionRecord> {
    if pool.is_empty() {
        return Err(AespError::Protocol("cannot select from an empty prompt pool".into()));
    }
    let evidence = pool
        .bundles()
        .iter()
        .map(|b| task_evidence(q, b, cfg.temperature))
        .collect::<Result<Vec<_>>>()?;
    let pick = |better: &dyn Fn(&TaskEvidence, &TaskEvidence) -> bool| {
        let mut best = &evidence[0];
        for e in &evidence[1..] {
            if better(e, best) {
                best = e;
            }
        }
        best.task_id
    };
    let p1 = pick(&|a, b| a.max_score > b.max_score);
    let p2 = pick(&|a, b| a.entropy < b.entropy);
    let p3 = pick(&|a, b| a.max_prototype_prob > b.max_prototype_prob);
    let chosen = match cfg.mode {
        IqkmMode::Full => vote(p1, p2, p3),
        IqkmMode::MultiKeyOnly => p1,
        IqkmMode::EntropyOnly => p2,
        IqkmMode::PrototypeOnly => p3,
    };
    Ok(SelectionRecord {
        query_id: 0,
        ground_truth_task: None,
        p1,
        p2,
        p3,
        chosen,
    })
}

/// Multi-key loss for one query and its gradient with respect to the keys.
pub fn key_loss_and_grad(
    q: ArrayView1<f64>,
    keys: &Array2<f64>,
    true_class_index: usize,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let mut raw = Array1::zeros(keys.nrows());
    for (i, k) in keys.outer_iter().enumerate() {
        raw[i] = cosine(k, q).map_err(|_| {
            AespError::Degenerate(format!("key for class index {i} (or the query) has zero norm"))
        })?;
    }
    let score = ScoreVector {
        softmaxed: softmax(raw.view(), temperature),
        raw,
    };
    let loss = multi_key_loss(&score, true_class_index)?;
    let mut grad = Array2::zeros(keys.raw_dim());
    for (i, k) in keys.outer_iter().enumerate() {
        let y = if i == true_class_index { 1.0 } else { 0.0 };
        let d_raw = (score.softmaxed[i] - y) / temperature;
        let d_key = cosine_grad_wrt_first(k, q)?;
        grad.row_mut(i).scaled_add(d_raw, &d_key);
    }
    Ok((loss, grad))
}

/// One gradient step on the keys against the mean multi-key loss of `batch`.
/// Returns the mean loss before the step.
pub fn train_keys(
    batch: &[(Array1<f64>, usize)],
    keys: &mut Array2<f64>,
    step_size: f64,
    temperature: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(AespError::Protocol("train_keys needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros(keys.raw_dim());
    for (q, class) in batch {
        let (l, g) = key_loss_and_grad(q.view(), keys, *class, temperature)?;
        total += l;
        grad += &g;
    }
    let n = batch.len() as f64;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(AespError::Numerical(format!("multi-key loss is {loss}")));
    }
    keys.scaled_add(-step_size / n, &grad);
    Ok(loss)
}
