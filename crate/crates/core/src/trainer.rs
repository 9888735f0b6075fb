//! The class-incremental protocol: task splits, one training session per
//! task, prototype finalization, and evaluation after every session.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterParams, Backbone};
use crate::checkpoint::bundle_checksum;
use crate::data::{Dataset, Sample};
use crate::error::{AespError, Result};
use crate::evaluator::{chosen_under, AccuracyMatrix};
use crate::iqkm::{select_task, IqkmMode, SelectionRecord, SelectorConfig};
use crate::losses::{ContrastConfig, LossTerms};
use crate::model::{mean_rows, stack_rows, Classifier, LabelSpace, PromptPool, TaskBundle, TaskParams};
use crate::objective::{batch_loss_grad, predict_local, ObjectiveConfig, PreparedSample};
use crate::text::TaskSemantics;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub total_classes: usize,
    pub classes_per_task: usize,
    /// Seed of the class-order permutation; `None` keeps the natural order.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_task == 0 || self.total_classes == 0 {
            return Err(AespError::Config("protocol needs at least one class per task".into()));
        }
        if !self.total_classes.is_multiple_of(self.classes_per_task) {
            return Err(AespError::Config(format!(
                "protocol.total_classes = {} is not divisible by protocol.classes_per_task = {}",
                self.total_classes, self.classes_per_task
            )));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.total_classes / self.classes_per_task.max(1)
    }
}

/// Splits `class_ids` into consecutive blocks after an optional seeded shuffle.
pub fn split_tasks(class_ids: &[usize], spec: &ProtocolSpec) -> Result<LabelSpace> {
    spec.validate()?;
    if class_ids.len() != spec.total_classes {
        return Err(AespError::Config(format!(
            "protocol expects {} classes, dataset has {}",
            spec.total_classes,
            class_ids.len()
        )));
    }
    let mut order = class_ids.to_vec();
    if let Some(seed) = spec.class_order_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    LabelSpace::new(order.chunks(spec.classes_per_task).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    24
}
fn default_epochs() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            epochs: default_epochs(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AespError::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AespError::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(AespError::Config("train.batch_size and train.epochs must be > 0".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at step `total_steps − 1`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let frac = step as f64 / (total_steps - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Heavy-ball SGD: `v ← μ v + g`, `θ ← θ − lr · v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: TaskParams,
}

impl Sgd {
    pub fn new(params: &TaskParams, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut TaskParams, grad: &TaskParams, lr: f64) {
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(grad, 1.0);
        params.add_scaled(&self.velocity, -lr);
    }
}

/// Method switches and hyperparameters shared by every session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "default_vp_len")]
    pub visual_prompt_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub iqkm: IqkmMode,
    #[serde(default = "yes")]
    pub use_adapter: bool,
    #[serde(default = "yes")]
    pub use_semantic_prompt: bool,
}

fn default_vp_len() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.3
}
fn default_temperature() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            visual_prompt_len: default_vp_len(),
            alpha: default_alpha(),
            temperature: default_temperature(),
            iqkm: IqkmMode::Full,
            use_adapter: true,
            use_semantic_prompt: true,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        ContrastConfig::new(self.alpha)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(AespError::Config(format!(
                "method.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.visual_prompt_len == 0 {
            return Err(AespError::Config("method.visual_prompt_len must be > 0".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            contrast: ContrastConfig { alpha: self.alpha },
            temperature: self.temperature,
        }
    }

    pub fn selector(&self) -> SelectorConfig {
        SelectorConfig {
            mode: self.iqkm,
            temperature: self.temperature,
        }
    }
}

/// Mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub key: f64,
    pub contrast: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub task_id: usize,
    pub final_losses: LossTerms,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub bundle_checksum: String,
    /// Training-set accuracy with the task's own bundle.
    pub train_accuracy: f64,
    /// Training samples consumed, per class.
    pub samples_read_by_class: BTreeMap<usize, usize>,
    /// Consumed samples whose class is outside the task.
    pub foreign_samples_read: usize,
}

/// Trains and finalizes task bundles against a frozen backbone.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub backbone: &'a Backbone,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(backbone: &'a Backbone, method: MethodConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        method.validate()?;
        train.validate()?;
        if method.use_adapter != !backbone.config.resolved_adapter_layers().is_empty() {
            return Err(AespError::Config(format!(
                "method.use_adapter = {} but the backbone has {} adapter layers",
                method.use_adapter,
                backbone.config.resolved_adapter_layers().len()
            )));
        }
        Ok(Trainer {
            backbone,
            method,
            train,
            seed,
        })
    }

    fn rng(&self, task_id: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (task_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Fresh parameters for a task. The up-projections start at zero so the
    /// adapted backbone initially computes the frozen function.
    pub fn init_bundle(&self, task_id: usize, class_ids: &[usize], semantics: &TaskSemantics) -> Result<TaskBundle> {
        let cfg = &self.backbone.config;
        let d = cfg.embed_dim;
        let n = class_ids.len();
        if semantics.prompt.len() != d || semantics.class_embeddings.dim() != (n, d) {
            return Err(AespError::Config(format!(
                "task {task_id}: semantic embeddings do not match width {d} and {n} classes"
            )));
        }
        let mut rng = self.rng(task_id);
        let bound = 1.0 / (d as f64).sqrt();
        let uniform = Uniform::new(-bound, bound).expect("positive bound");
        let visual_prompt = Array2::from_shape_fn((self.method.visual_prompt_len, d), |_| uniform.sample(&mut rng));
        let key_dist = Normal::new(0.0, bound).expect("positive std");
        let keys = Array2::from_shape_fn((n, d), |_| key_dist.sample(&mut rng));
        let down_dist = Normal::new(0.0, 0.02).expect("positive std");
        let adapters = cfg
            .resolved_adapter_layers()
            .into_iter()
            .map(|layer_index| AdapterParams {
                layer_index,
                down: Array2::from_shape_fn((d, cfg.adapter_dim), |_| down_dist.sample(&mut rng)),
                up: Array2::zeros((cfg.adapter_dim, d)),
            })
            .collect();
        let semantic_prompt = if self.method.use_semantic_prompt {
            semantics.prompt.clone()
        } else {
            let unit = Normal::new(0.0, 1.0).expect("positive std");
            Array1::from_shape_fn(d, |_| unit.sample(&mut rng))
        };
        let bundle = TaskBundle {
            task_id,
            class_ids: class_ids.to_vec(),
            params: TaskParams {
                visual_prompt,
                semantic_prompt,
                keys,
                adapters,
                classifier: Classifier::zeros(d, n),
            },
            semantic_prompt_trainable: !self.method.use_semantic_prompt,
            prototypes: None,
            class_semantics: semantics.class_embeddings.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Frozen-path quantities for each sample; errors on a class outside `class_ids`.
    pub fn prepare(&self, class_ids: &[usize], samples: &[&Sample]) -> Result<Vec<PreparedSample>> {
        samples
            .par_iter()
            .map(|s| {
                let class_index = class_ids.iter().position(|&c| c == s.class_id).ok_or_else(|| {
                    AespError::Data(format!(
                        "sample {} has class {} outside the task classes {class_ids:?}",
                        s.id, s.class_id
                    ))
                })?;
                Ok(PreparedSample {
                    image_tokens: self.backbone.image_tokens(&s.image)?,
                    query: self.backbone.query_features(&s.image)?,
                    class_index,
                })
            })
            .collect()
    }

    /// Trains task `task_id` on `samples` with ground-truth routing and
    /// finalizes its prototypes. The pool is only read.
    pub fn train_task(
        &self,
        task_id: usize,
        class_ids: &[usize],
        samples: &[&Sample],
        pool: &PromptPool,
        semantics: &TaskSemantics,
    ) -> Result<(TaskBundle, SessionReport, Vec<LossRecord>)> {
        let start = Instant::now();
        let expected = pool.num_tasks_seen() + 1;
        if task_id != expected {
            return Err(AespError::Protocol(format!(
                "expected to train task {expected}, got task {task_id}"
            )));
        }
        if samples.is_empty() {
            return Err(AespError::Data(format!("task {task_id} has no training samples")));
        }
        let mut samples_read_by_class = BTreeMap::new();
        for s in samples {
            *samples_read_by_class.entry(s.class_id).or_insert(0) += 1;
        }
        let foreign_samples_read = samples_read_by_class
            .iter()
            .filter(|(c, _)| !class_ids.contains(c))
            .map(|(_, n)| n)
            .sum();
        let prepared = self.prepare(class_ids, samples)?;

        let mut bundle = self.init_bundle(task_id, class_ids, semantics)?;
        let mut rng = self.rng(task_id);
        // Decorrelate the shuffle stream from initialization.
        rng.set_stream(1);
        let objective = self.method.objective();
        let mut sgd = Sgd::new(&bundle.params, self.train.momentum);
        let batch = self.train.batch_size;
        let steps_per_epoch = prepared.len().div_ceil(batch);
        let total_steps = steps_per_epoch * self.train.epochs;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut records = Vec::with_capacity(total_steps);
        let mut epoch_losses = Vec::with_capacity(self.train.epochs);
        let mut step = 0;
        for epoch in 0..self.train.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            for chunk in order.chunks(batch) {
                let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
                let (terms, grad) = batch_loss_grad(self.backbone, &bundle, &items, &objective)?;
                let lr = cosine_lr(self.train.learning_rate, step, total_steps);
                sgd.step(&mut bundle.params, &grad, lr);
                epoch_total += terms.total;
                records.push(LossRecord {
                    task: task_id,
                    epoch,
                    step,
                    lr,
                    key: terms.key,
                    contrast: terms.contrast,
                    ce: terms.ce,
                    total: terms.total,
                });
                step += 1;
            }
            epoch_losses.push(epoch_total / steps_per_epoch as f64);
        }

        bundle.prototypes = Some(prototypes_from_prepared(&prepared, class_ids, self.backbone.config.embed_dim)?);
        let train_accuracy = self.accuracy_on(&bundle, &prepared)?;
        let final_losses = records
            .last()
            .map(|r| LossTerms {
                key: r.key,
                contrast: r.contrast,
                ce: r.ce,
                total: r.total,
            })
            .unwrap_or_default();
        let report = SessionReport {
            task_id,
            final_losses,
            epoch_losses,
            steps: total_steps,
            wall_time_secs: start.elapsed().as_secs_f64(),
            bundle_checksum: bundle_checksum(&bundle)?,
            train_accuracy,
            samples_read_by_class,
            foreign_samples_read,
        };
        Ok((bundle, report, records))
    }

    fn accuracy_on(&self, bundle: &TaskBundle, prepared: &[PreparedSample]) -> Result<f64> {
        let class_token = self.backbone.class_token();
        let hits = prepared
            .par_iter()
            .map(|s| {
                let seq = crate::model::assemble_input(class_token.view(), s.image_tokens.view(), bundle)?;
                let out = self.backbone.forward(&seq, bundle)?;
                Ok(usize::from(predict_local(bundle, out.cls_feature.view()) == s.class_index))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / prepared.len() as f64)
    }
}

fn prototypes_from_prepared(prepared: &[PreparedSample], class_ids: &[usize], d: usize) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(class_ids.len());
    for (ci, c) in class_ids.iter().enumerate() {
        let qs: Vec<Array1<f64>> = prepared
            .iter()
            .filter(|s| s.class_index == ci)
            .map(|s| s.query.clone())
            .collect();
        rows.push(mean_rows(&qs).ok_or_else(|| {
            AespError::Data(format!("class {c} has no training samples; cannot compute its prototype"))
        })?);
    }
    Ok(stack_rows(&rows, d))
}

/// Row `c` is the mean query feature of class `class_ids[c]` over `samples`.
pub fn compute_prototypes(backbone: &Backbone, class_ids: &[usize], samples: &[&Sample]) -> Result<Array2<f64>> {
    let mut per_class: Vec<Vec<Array1<f64>>> = vec![Vec::new(); class_ids.len()];
    for s in samples {
        let ci = class_ids.iter().position(|&c| c == s.class_id).ok_or_else(|| {
            AespError::Data(format!("sample {} has class {} outside {class_ids:?}", s.id, s.class_id))
        })?;
        per_class[ci].push(backbone.query_features(&s.image)?);
    }
    let rows = per_class
        .iter()
        .zip(class_ids)
        .map(|(qs, c)| {
            mean_rows(qs).ok_or_else(|| {
                AespError::Data(format!("class {c} has no training samples; cannot compute its prototype"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_rows(&rows, backbone.config.embed_dim))
}

/// A test sample with its frozen-path quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub sample_id: usize,
    pub task_id: usize,
    pub class_index: usize,
    pub image_tokens: Array2<f64>,
    pub query: Array1<f64>,
}

pub fn prepare_test(backbone: &Backbone, dataset: &Dataset, labels: &LabelSpace) -> Result<Vec<TestItem>> {
    let mut wanted = Vec::new();
    for t in 1..=labels.num_tasks() {
        let classes = labels.task_classes(t);
        for s in dataset.test_for(classes) {
            let class_index = classes.iter().position(|&c| c == s.class_id).expect("filtered");
            wanted.push((t, class_index, s));
        }
    }
    wanted
        .par_iter()
        .map(|&(task_id, class_index, s)| {
            Ok(TestItem {
                sample_id: s.id,
                task_id,
                class_index,
                image_tokens: backbone.image_tokens(&s.image)?,
                query: backbone.query_features(&s.image)?,
            })
        })
        .collect()
}

/// Outcome of one test query after a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub session: usize,
    pub selection: SelectionRecord,
    /// Whether the true task's bundle classifies the sample correctly.
    pub oracle_correct: bool,
}

impl EvalRecord {
    /// Correct under routing mode `mode`: the chosen task must be the true one.
    pub fn correct_under(&self, mode: IqkmMode) -> bool {
        self.oracle_correct && Some(chosen_under(&self.selection, mode)) == self.selection.ground_truth_task
    }
}

/// How evaluation picks the bundle for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    Oracle,
    Iqkm(IqkmMode),
}

/// Evaluates `pool` on the test items of its tasks. Records are in item order.
pub fn evaluate_session(
    backbone: &Backbone,
    pool: &PromptPool,
    items: &[TestItem],
    selector: &SelectorConfig,
) -> Result<Vec<EvalRecord>> {
    let session = pool.num_tasks_seen();
    let class_token = backbone.class_token();
    items
        .par_iter()
        .filter(|it| it.task_id <= session)
        .map(|it| {
            let own = pool.get(it.task_id).expect("task within session");
            let seq = crate::model::assemble_input(class_token.view(), it.image_tokens.view(), own)?;
            let out = backbone.forward(&seq, own)?;
            let oracle_correct = predict_local(own, out.cls_feature.view()) == it.class_index;
            let mut selection = select_task(it.query.view(), pool, selector)?;
            selection.query_id = it.sample_id;
            selection.ground_truth_task = Some(it.task_id);
            Ok(EvalRecord {
                session,
                selection,
                oracle_correct,
            })
        })
        .collect()
}

/// Row `session` of the accuracy matrix from that session's records.
pub fn accuracy_row(records: &[EvalRecord], session: usize, routing: Routing) -> Result<Vec<f64>> {
    let mut hit = vec![0usize; session];
    let mut total = vec![0usize; session];
    for r in records.iter().filter(|r| r.session == session) {
        let g = r.selection.ground_truth_task.expect("evaluation records carry ground truth");
        total[g - 1] += 1;
        let ok = match routing {
            Routing::Oracle => r.oracle_correct,
            Routing::Iqkm(mode) => r.correct_under(mode),
        };
        hit[g - 1] += usize::from(ok);
    }
    if let Some(i) = total.iter().position(|&n| n == 0) {
        return Err(AespError::Data(format!("no test samples for task {}", i + 1)));
    }
    Ok(hit.iter().zip(&total).map(|(&h, &n)| h as f64 / n as f64).collect())
}

pub fn accuracy_matrix(
    records: &[EvalRecord],
    test_sizes: Vec<usize>,
    sessions: usize,
    routing: Routing,
) -> Result<AccuracyMatrix> {
    let mut m = AccuracyMatrix::new(test_sizes.len(), test_sizes)?;
    for t in 1..=sessions {
        m.push_row(accuracy_row(records, t, routing)?)?;
    }
    Ok(m)
}

/// Everything produced by one finished session.
#[derive(Debug)]
pub struct SessionEvent<'e> {
    pub bundle: &'e TaskBundle,
    pub report: &'e SessionReport,
    pub losses: &'e [LossRecord],
    pub records: &'e [EvalRecord],
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub labels: LabelSpace,
    pub pool: PromptPool,
    pub test_sizes: Vec<usize>,
    /// Accuracy with the configured selector.
    pub accuracy: AccuracyMatrix,
    /// Accuracy with ground-truth routing.
    pub oracle_accuracy: AccuracyMatrix,
    pub records: Vec<EvalRecord>,
    /// Reports of the sessions trained in this call.
    pub sessions: Vec<SessionReport>,
    pub losses: Vec<LossRecord>,
}

impl ProtocolOutcome {
    pub fn selection_records(&self, session: usize) -> Vec<SelectionRecord> {
        self.records
            .iter()
            .filter(|r| r.session == session)
            .map(|r| r.selection.clone())
            .collect()
    }
}

pub fn test_sizes(dataset: &Dataset, labels: &LabelSpace) -> Vec<usize> {
    (1..=labels.num_tasks())
        .map(|t| dataset.test_for(labels.task_classes(t)).count())
        .collect()
}

/// Trains tasks in order, starting after the sessions already in `resume`,
/// and evaluates after each session. `semantics[t − 1]` belongs to task `t`.
pub fn run_protocol(
    trainer: &Trainer,
    labels: &LabelSpace,
    dataset: &Dataset,
    semantics: &[TaskSemantics],
    resume: PromptPool,
    mut observer: impl FnMut(&SessionEvent) -> Result<()>,
) -> Result<ProtocolOutcome> {
    let num_tasks = labels.num_tasks();
    if semantics.len() != num_tasks {
        return Err(AespError::Config(format!(
            "{} semantic sets for {num_tasks} tasks",
            semantics.len()
        )));
    }
    for b in resume.bundles() {
        if b.class_ids != labels.task_classes(b.task_id) {
            return Err(AespError::Protocol(format!(
                "resumed task {} has classes {:?}, protocol assigns {:?}",
                b.task_id,
                b.class_ids,
                labels.task_classes(b.task_id)
            )));
        }
    }
    let sizes = test_sizes(dataset, labels);
    let items = prepare_test(trainer.backbone, dataset, labels)?;
    let selector = trainer.method.selector();

    let mut pool = PromptPool::new();
    let mut records = Vec::new();
    for b in resume.bundles() {
        pool.push(b.clone())?;
        records.extend(evaluate_session(trainer.backbone, &pool, &items, &selector)?);
    }
    let mut sessions = Vec::new();
    let mut losses = Vec::new();
    for t in pool.num_tasks_seen() + 1..=num_tasks {
        let classes = labels.task_classes(t);
        let samples: Vec<&Sample> = dataset.train_for(classes).collect();
        let (bundle, report, step_losses) =
            trainer.train_task(t, classes, &samples, &pool, &semantics[t - 1])?;
        pool.push(bundle)?;
        let session_records = evaluate_session(trainer.backbone, &pool, &items, &selector)?;
        observer(&SessionEvent {
            bundle: pool.get(t).expect("just pushed"),
            report: &report,
            losses: &step_losses,
            records: &session_records,
        })?;
        records.extend(session_records);
        sessions.push(report);
        losses.extend(step_losses);
    }
    let done = pool.num_tasks_seen();
    Ok(ProtocolOutcome {
        accuracy: accuracy_matrix(&records, sizes.clone(), done, Routing::Iqkm(selector.mode))?,
        oracle_accuracy: accuracy_matrix(&records, sizes.clone(), done, Routing::Oracle)?,
        labels: labels.clone(),
        pool,
        test_sizes: sizes,
        records,
        sessions,
        losses,
    })
}
