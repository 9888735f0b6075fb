//! Shared domain types: token sequences, per-task bundles, the prompt pool
//! and the label space.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::AdapterParams;
use crate::error::{AespError, Result};

/// Backbone input `[class token, image tokens, semantic prompt, visual prompt]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub class_token: Array1<f64>,
    pub image_tokens: Array2<f64>,
    pub semantic_prompt: Array1<f64>,
    pub visual_prompt: Array2<f64>,
}

impl TokenSequence {
    pub fn embed_dim(&self) -> usize {
        self.class_token.len()
    }

    pub fn num_image_tokens(&self) -> usize {
        self.image_tokens.nrows()
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.visual_prompt.nrows()
    }

    /// `1 + L_img + 1 + L_vp`.
    pub fn len(&self) -> usize {
        1 + self.num_image_tokens() + 1 + self.num_visual_tokens()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            image_tokens: self.num_image_tokens(),
            visual_tokens: self.num_visual_tokens(),
        }
    }

    /// Stacks all slots into one `len × d` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.embed_dim();
        let layout = self.layout();
        let mut m = Array2::zeros((self.len(), d));
        m.row_mut(0).assign(&self.class_token);
        m.slice_mut(s![layout.image_range(), ..])
            .assign(&self.image_tokens);
        m.row_mut(layout.semantic_index()).assign(&self.semantic_prompt);
        m.slice_mut(s![layout.visual_range(), ..])
            .assign(&self.visual_prompt);
        m
    }

    /// Inverse of [`TokenSequence::to_matrix`].
    pub fn from_matrix(m: ArrayView2<f64>, layout: SequenceLayout) -> Result<Self> {
        if m.nrows() != layout.len() {
            return Err(AespError::Config(format!(
                "token matrix has {} rows, layout expects {}",
                m.nrows(),
                layout.len()
            )));
        }
        Ok(TokenSequence {
            class_token: m.row(0).to_owned(),
            image_tokens: m.slice(s![layout.image_range(), ..]).to_owned(),
            semantic_prompt: m.row(layout.semantic_index()).to_owned(),
            visual_prompt: m.slice(s![layout.visual_range(), ..]).to_owned(),
        })
    }
}

/// Position map of a [`TokenSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub image_tokens: usize,
    pub visual_tokens: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        2 + self.image_tokens + self.visual_tokens
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        1..1 + self.image_tokens
    }

    pub fn semantic_index(&self) -> usize {
        1 + self.image_tokens
    }

    pub fn visual_range(&self) -> std::ops::Range<usize> {
        let start = 2 + self.image_tokens;
        start..start + self.visual_tokens
    }

    /// Rows routed through the semantic adapter: image tokens and the semantic prompt.
    pub fn adapter_range(&self) -> std::ops::Range<usize> {
        1..2 + self.image_tokens
    }
}

/// Per-task linear head `d → N_inc`, applied as `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Classifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Classifier {
            weight: Array2::zeros((dim, classes)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, feature: ArrayView1<f64>) -> Array1<f64> {
        feature.dot(&self.weight) + &self.bias
    }
}

/// The trainable tensors of one task. Also used as the gradient and
/// momentum container, since it has exactly the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub visual_prompt: Array2<f64>,
    pub semantic_prompt: Array1<f64>,
    pub keys: Array2<f64>,
    pub adapters: Vec<AdapterParams>,
    pub classifier: Classifier,
}

impl TaskParams {
    pub fn zeros_like(&self) -> Self {
        TaskParams {
            visual_prompt: Array2::zeros(self.visual_prompt.raw_dim()),
            semantic_prompt: Array1::zeros(self.semantic_prompt.raw_dim()),
            keys: Array2::zeros(self.keys.raw_dim()),
            adapters: self
                .adapters
                .iter()
                .map(|a| AdapterParams {
                    layer_index: a.layer_index,
                    down: Array2::zeros(a.down.raw_dim()),
                    up: Array2::zeros(a.up.raw_dim()),
                })
                .collect(),
            classifier: Classifier {
                weight: Array2::zeros(self.classifier.weight.raw_dim()),
                bias: Array1::zeros(self.classifier.bias.raw_dim()),
            },
        }
    }

    /// Named flat views of every tensor, in canonical order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("visual_prompt".into(), slice(self.visual_prompt.as_slice())),
            ("semantic_prompt".into(), slice(self.semantic_prompt.as_slice())),
            ("keys".into(), slice(self.keys.as_slice())),
        ];
        for a in &self.adapters {
            out.push((adapter_name(a.layer_index, "down"), slice(a.down.as_slice())));
            out.push((adapter_name(a.layer_index, "up"), slice(a.up.as_slice())));
        }
        out.push(("classifier.weight".into(), slice(self.classifier.weight.as_slice())));
        out.push(("classifier.bias".into(), slice(self.classifier.bias.as_slice())));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("visual_prompt".into(), slice_mut(self.visual_prompt.as_slice_mut())),
            ("semantic_prompt".into(), slice_mut(self.semantic_prompt.as_slice_mut())),
            ("keys".into(), slice_mut(self.keys.as_slice_mut())),
        ];
        for a in &mut self.adapters {
            let l = a.layer_index;
            out.push((adapter_name(l, "down"), slice_mut(a.down.as_slice_mut())));
            out.push((adapter_name(l, "up"), slice_mut(a.up.as_slice_mut())));
        }
        out.push((
            "classifier.weight".into(),
            slice_mut(self.classifier.weight.as_slice_mut()),
        ));
        out.push((
            "classifier.bias".into(),
            slice_mut(self.classifier.bias.as_slice_mut()),
        ));
        out
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &TaskParams, scale: f64) {
        let theirs = other.groups();
        for ((_, mine), (_, src)) in self.groups_mut().into_iter().zip(theirs) {
            for (m, s) in mine.iter_mut().zip(src) {
                *m += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }
}

pub(crate) fn adapter_name(layer: usize, part: &str) -> String {
    format!("adapters.layer{layer}.{part}")
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameter arrays are kept in standard layout")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameter arrays are kept in standard layout")
}

/// All per-task state, frozen once the task's session ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub params: TaskParams,
    /// Whether the semantic prompt is a trainable vector rather than a frozen
    /// text embedding (the "without semantic prompt" ablation).
    pub semantic_prompt_trainable: bool,
    /// Per-class mean query features; `None` until the session is finalized.
    pub prototypes: Option<Array2<f64>>,
    pub class_semantics: Array2<f64>,
}

impl TaskBundle {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.keys.ncols()
    }

    pub fn local_index(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn adapter(&self, layer: usize) -> Option<&AdapterParams> {
        self.params.adapters.iter().find(|a| a.layer_index == layer)
    }

    /// Names of the tensor groups updated during training.
    pub fn is_trainable(&self, group: &str) -> bool {
        group != "semantic_prompt" || self.semantic_prompt_trainable
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let n = self.num_classes();
        let p = &self.params;
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(AespError::Config(format!(
                    "task {}: inconsistent {what}",
                    self.task_id
                )))
            }
        };
        check(p.keys.nrows() == n, "key count")?;
        check(p.visual_prompt.ncols() == d, "visual prompt width")?;
        check(p.semantic_prompt.len() == d, "semantic prompt width")?;
        check(p.classifier.weight.dim() == (d, n), "classifier weight shape")?;
        check(p.classifier.bias.len() == n, "classifier bias length")?;
        check(self.class_semantics.dim() == (n, d), "class semantics shape")?;
        if let Some(pr) = &self.prototypes {
            check(pr.dim() == (n, d), "prototype shape")?;
        }
        for a in &p.adapters {
            check(a.down.nrows() == d && a.up.ncols() == d, "adapter width")?;
            check(a.down.ncols() == a.up.nrows(), "adapter bottleneck")?;
        }
        Ok(())
    }
}

/// Append-only store of finalized task bundles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptPool {
    bundles: Vec<TaskBundle>,
}

impl PromptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bundles(&self) -> &[TaskBundle] {
        &self.bundles
    }

    pub fn num_tasks_seen(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Option<&TaskBundle> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.bundles.get(i))
    }

    /// Appends the bundle for task `num_tasks_seen + 1`. Its classes must not
    /// overlap any earlier task and its prototypes must be populated.
    pub fn push(&mut self, bundle: TaskBundle) -> Result<()> {
        let expected = self.num_tasks_seen() + 1;
        if bundle.task_id != expected {
            return Err(AespError::Protocol(format!(
                "pool expects task {expected}, got task {}",
                bundle.task_id
            )));
        }
        if bundle.prototypes.is_none() {
            return Err(AespError::Protocol(format!(
                "task {} is not finalized (no prototypes)",
                bundle.task_id
            )));
        }
        let seen: BTreeSet<usize> = self
            .bundles
            .iter()
            .flat_map(|b| b.class_ids.iter().copied())
            .collect();
        if let Some(c) = bundle.class_ids.iter().find(|c| seen.contains(c)) {
            return Err(AespError::Protocol(format!(
                "class {c} of task {} already belongs to an earlier task",
                bundle.task_id
            )));
        }
        bundle.validate()?;
        self.bundles.push(bundle);
        Ok(())
    }

    /// Pool restricted to the first `tasks` bundles.
    pub fn prefix(&self, tasks: usize) -> PromptPool {
        PromptPool {
            bundles: self.bundles[..tasks.min(self.bundles.len())].to_vec(),
        }
    }
}

/// Per-task class sets `Y(1), …, Y(T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    tasks: Vec<Vec<usize>>,
}

impl LabelSpace {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(AespError::Config("label space needs at least one task".into()));
        };
        let n_inc = first.len();
        let mut seen = BTreeSet::new();
        for (t, classes) in tasks.iter().enumerate() {
            if classes.len() != n_inc || classes.is_empty() {
                return Err(AespError::Config(format!(
                    "task {} has {} classes, expected {n_inc}",
                    t + 1,
                    classes.len()
                )));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(AespError::Config(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(LabelSpace { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks[0].len()
    }

    /// `Y(task)` for 1-based `task`.
    pub fn task_classes(&self, task: usize) -> &[usize] {
        &self.tasks[task - 1]
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    /// `Y(1) ∪ … ∪ Y(through)`.
    pub fn seen_classes(&self, through: usize) -> BTreeSet<usize> {
        self.tasks[..through].iter().flatten().copied().collect()
    }

    pub fn task_of(&self, class_id: usize) -> Option<usize> {
        self.tasks
            .iter()
            .position(|ts| ts.contains(&class_id))
            .map(|i| i + 1)
    }
}

/// Builds the backbone input for one image under one task's prompts.
pub fn assemble_input(
    class_token: ArrayView1<f64>,
    image_tokens: ArrayView2<f64>,
    bundle: &TaskBundle,
) -> Result<TokenSequence> {
    let d = class_token.len();
    let vp = &bundle.params.visual_prompt;
    let sp = &bundle.params.semantic_prompt;
    if image_tokens.ncols() != d || vp.ncols() != d || sp.len() != d {
        return Err(AespError::Config(format!(
            "assemble_input: widths disagree (class {d}, image {}, semantic {}, visual {})",
            image_tokens.ncols(),
            sp.len(),
            vp.ncols()
        )));
    }
    Ok(TokenSequence {
        class_token: class_token.to_owned(),
        image_tokens: image_tokens.to_owned(),
        semantic_prompt: sp.clone(),
        visual_prompt: vp.clone(),
    })
}

/// Row-wise mean, used for prototypes.
pub(crate) fn mean_rows(rows: &[Array1<f64>]) -> Option<Array1<f64>> {
    let first = rows.first()?;
    let mut acc = Array1::zeros(first.len());
    for r in rows {
        acc += r;
    }
    Some(acc / rows.len() as f64)
}

pub(crate) fn stack_rows(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    m
}
