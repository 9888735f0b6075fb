//! Run directories: training with resume, checkpoint-only evaluation,
//! paired ablations and embedding-cache construction.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.toml            config, config hash, backbone checksum
//! summary.json             metrics per seed and their mean
//! seed_<s>/bundles/        pool.toml + task_<t>.safetensors
//! seed_<s>/sessions/       session_<t>.json, losses_<t>.jsonl
//! seed_<s>/selection_records.jsonl
//! seed_<s>/metrics.json
//! seed_<s>/exports/        metrics.csv, curve.csv, selection_<mode>.{csv,png}
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::{append_bundle, load_pool, read_index};
use crate::config::{EncoderSource, ExperimentConfig};
use crate::data::{class_names, ingest, Dataset};
use crate::error::{AespError, Result};
use crate::evaluator::{
    avg_acc, export, forgetting, last_acc, metrics_so_far, selection_matrix_for_mode, AccuracyMatrix, ExportSet,
    SessionMetrics,
};
use crate::iqkm::IqkmMode;
use crate::model::{LabelSpace, PromptPool};
use crate::text::{task_semantics, templates_for, EmbeddingCache, Projection, TaskSemantics, TextEncoder};
use crate::trainer::{
    accuracy_matrix, evaluate_session, prepare_test, run_protocol, split_tasks, test_sizes, EvalRecord, Routing,
    Trainer,
};

pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.json";
const LOCK: &str = ".lock";
const FORMAT_VERSION: u32 = 1;

const ALL_MODES: [IqkmMode; 4] = [
    IqkmMode::Full,
    IqkmMode::MultiKeyOnly,
    IqkmMode::EntropyOnly,
    IqkmMode::PrototypeOnly,
];

fn mode_label(mode: IqkmMode) -> &'static str {
    match mode {
        IqkmMode::Full => "full",
        IqkmMode::MultiKeyOnly => "multi-key-only",
        IqkmMode::EntropyOnly => "entropy-only",
        IqkmMode::PrototypeOnly => "prototype-only",
    }
}

/// Everything `eval` needs to rebuild a run without the original config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub backbone_checksum: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| AespError::io(&path, e))?;
        let m: Manifest = toml::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(AespError::Config(format!(
                "{}: unsupported format_version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST);
        fs::write(&path, toml::to_string(self)?).map_err(|e| AespError::io(&path, e))
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| AespError::io(run_dir, e))?;
        let path = run_dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AespError::Protocol(format!(
                "run directory {} is locked by another writer ({} exists)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(AespError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Metrics of one seed, derived from evaluation records only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub routing: String,
    pub sessions_completed: usize,
    pub num_tasks: usize,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub last_acc: f64,
    pub avg_acc: f64,
    /// Undefined before the second session.
    pub forgetting: Option<f64>,
    /// Last-session task-selection accuracy per strategy.
    pub selection_accuracy: BTreeMap<String, f64>,
    pub per_session: Vec<SessionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seeds: Vec<SeedMetrics>,
    pub mean_last_acc: f64,
    pub mean_avg_acc: f64,
    pub mean_forgetting: Option<f64>,
    pub mean_selection_accuracy: BTreeMap<String, f64>,
}

impl RunSummary {
    fn new(run_dir: &Path, config_hash: String, seeds: Vec<SeedMetrics>) -> Self {
        let n = seeds.len().max(1) as f64;
        let mean = |f: &dyn Fn(&SeedMetrics) -> f64| seeds.iter().map(f).sum::<f64>() / n;
        let forgetting = seeds
            .iter()
            .map(|s| s.forgetting)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let mut selection = BTreeMap::new();
        for mode in ALL_MODES {
            let label = mode_label(mode);
            selection.insert(label.to_string(), mean(&|s| s.selection_accuracy[label]));
        }
        RunSummary {
            run_dir: run_dir.to_path_buf(),
            config_hash,
            mean_last_acc: mean(&|s| s.last_acc),
            mean_avg_acc: mean(&|s| s.avg_acc),
            mean_forgetting: forgetting,
            mean_selection_accuracy: selection,
            seeds,
        }
    }

    /// Selection accuracy under the strategy the run was configured with.
    pub fn selection_accuracy(&self, mode: IqkmMode) -> f64 {
        self.mean_selection_accuracy[mode_label(mode)]
    }
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn bundles_dir(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("bundles")
}

fn routing_label(routing: Routing) -> String {
    match routing {
        Routing::Oracle => "oracle".into(),
        Routing::Iqkm(m) => mode_label(m).into(),
    }
}

/// Metrics from the records of sessions `1..=sessions`.
pub fn seed_metrics(
    seed: u64,
    records: &[EvalRecord],
    sizes: &[usize],
    sessions: usize,
    routing: Routing,
) -> Result<SeedMetrics> {
    if sessions == 0 {
        return Err(AespError::Protocol("no completed sessions to evaluate".into()));
    }
    let matrix = accuracy_matrix(records, sizes.to_vec(), sessions, routing)?;
    let sub = matrix.truncated(sessions)?;
    let last: Vec<_> = records
        .iter()
        .filter(|r| r.session == sessions)
        .map(|r| r.selection.clone())
        .collect();
    let mut selection = BTreeMap::new();
    for mode in ALL_MODES {
        let s = selection_matrix_for_mode(&last, sessions, mode)?;
        selection.insert(mode_label(mode).to_string(), s.accuracy());
    }
    Ok(SeedMetrics {
        seed,
        routing: routing_label(routing),
        sessions_completed: sessions,
        num_tasks: sizes.len(),
        accuracy_matrix: sub.rows().to_vec(),
        last_acc: last_acc(&sub)?,
        avg_acc: avg_acc(&sub)?,
        forgetting: forgetting(&sub).ok(),
        selection_accuracy: selection,
        per_session: metrics_so_far(&sub),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AespError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| AespError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| AespError::io(path, e))?;
    }
    w.flush().map_err(|e| AespError::io(path, e))
}

/// Shared, config-derived state of a run.
struct Prepared {
    dataset: Dataset,
    backbone: Backbone,
    labels: LabelSpace,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = ingest(&cfg.dataset)?;
    let backbone = cfg.build_backbone()?;
    let ids: Vec<usize> = (0..dataset.num_classes()).collect();
    let labels = split_tasks(&ids, &cfg.protocol)?;
    Ok(Prepared {
        dataset,
        backbone,
        labels,
    })
}

fn task_names(labels: &LabelSpace, names: &[String]) -> Vec<Vec<String>> {
    labels
        .tasks()
        .iter()
        .map(|t| t.iter().map(|&c| names[c].clone()).collect())
        .collect()
}

/// Semantic prompts and class embeddings for every task. Missing cache
/// entries are collected and reported together.
pub fn build_semantics(
    encoder: &dyn TextEncoder,
    projection: &Projection,
    tasks: &[Vec<String>],
) -> Result<Vec<TaskSemantics>> {
    let mut missing = Vec::new();
    for t in templates_for(tasks)? {
        match encoder.encode(&t) {
            Err(AespError::MissingEmbedding(m)) => missing.extend(m),
            Err(e) => return Err(e),
            Ok(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(AespError::MissingEmbedding(missing));
    }
    tasks
        .iter()
        .map(|names| task_semantics(names, encoder, projection))
        .collect()
}

/// Trains every seed of `cfg` into `cfg.output_dir`, resuming after the
/// sessions already checkpointed there.
pub fn train(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&run_dir)?;
    let p = prepare(cfg)?;
    let config_hash = cfg.hash()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash.clone(),
        backbone_checksum: p.backbone.checksum(),
        config: cfg.clone(),
    };
    if run_dir.join(MANIFEST).exists() {
        let existing = Manifest::read(&run_dir)?;
        if existing.config_hash != config_hash {
            return Err(AespError::Config(format!(
                "{} holds a run with a different configuration (hash {}); choose another output_dir",
                run_dir.display(),
                existing.config_hash
            )));
        }
    } else {
        manifest.write(&run_dir)?;
    }

    let encoder = cfg.build_encoder()?;
    let projection = Projection::seeded(encoder.dim(), p.backbone.config.embed_dim, cfg.encoder.projection_seed);
    let semantics = build_semantics(encoder.as_ref(), &projection, &task_names(&p.labels, &p.dataset.class_names))?;
    let sizes = test_sizes(&p.dataset, &p.labels);

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = seed_dir(&run_dir, seed);
        let bundles = bundles_dir(&run_dir, seed);
        let sessions_dir = dir.join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(|e| AespError::io(&sessions_dir, e))?;
        let resume = load_pool(&bundles)?;
        let trainer = Trainer::new(&p.backbone, cfg.method, cfg.train, seed)?;
        let outcome = run_protocol(&trainer, &p.labels, &p.dataset, &semantics, resume, |ev| {
            append_bundle(&bundles, ev.bundle)?;
            let t = ev.report.task_id;
            write_json(&sessions_dir.join(format!("session_{t}.json")), ev.report)?;
            write_jsonl(&sessions_dir.join(format!("losses_{t}.jsonl")), ev.losses)
        })?;
        let sessions = outcome.pool.num_tasks_seen();
        write_jsonl(&dir.join("selection_records.jsonl"), &outcome.records)?;
        let metrics = seed_metrics(seed, &outcome.records, &sizes, sessions, Routing::Iqkm(cfg.method.iqkm))?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        write_exports(&dir.join("exports"), &outcome.accuracy, &outcome.records, sessions)?;
        seeds.push(metrics);
    }
    let summary = RunSummary::new(&run_dir, config_hash, seeds);
    write_json(&run_dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

fn write_exports(dir: &Path, accuracy: &AccuracyMatrix, records: &[EvalRecord], sessions: usize) -> Result<()> {
    let last: Vec<_> = records
        .iter()
        .filter(|r| r.session == sessions)
        .map(|r| r.selection.clone())
        .collect();
    let selection = ALL_MODES
        .iter()
        .map(|&m| Ok((mode_label(m).to_string(), selection_matrix_for_mode(&last, sessions, m)?)))
        .collect::<Result<Vec<_>>>()?;
    export(
        dir,
        &ExportSet {
            accuracy,
            selection,
            render_png: true,
        },
    )?;
    Ok(())
}

/// Recomputes metrics of a run directory from its manifest and checkpoints.
/// Read-only; partial runs are evaluated through their last completed session.
pub fn eval(run_dir: &Path, oracle_routing: bool) -> Result<RunSummary> {
    let manifest = Manifest::read(run_dir)?;
    let cfg = &manifest.config;
    let p = prepare(cfg)?;
    let found = p.backbone.checksum();
    if found != manifest.backbone_checksum {
        return Err(AespError::Checksum {
            path: run_dir.join(MANIFEST),
            expected: manifest.backbone_checksum.clone(),
            found,
        });
    }
    let items = prepare_test(&p.backbone, &p.dataset, &p.labels)?;
    let sizes = test_sizes(&p.dataset, &p.labels);
    let selector = cfg.method.selector();
    let routing = if oracle_routing {
        Routing::Oracle
    } else {
        Routing::Iqkm(cfg.method.iqkm)
    };
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let pool = load_pool(&bundles_dir(run_dir, seed))?;
        let sessions = pool.num_tasks_seen();
        if sessions == 0 {
            continue;
        }
        let mut records = Vec::new();
        for t in 1..=sessions {
            records.extend(evaluate_session(&p.backbone, &pool.prefix(t), &items, &selector)?);
        }
        seeds.push(seed_metrics(seed, &records, &sizes, sessions, routing)?);
    }
    if seeds.is_empty() {
        return Err(AespError::Protocol(format!(
            "{} has no completed sessions",
            run_dir.display()
        )));
    }
    Ok(RunSummary::new(run_dir, manifest.config_hash, seeds))
}

/// Switch toggled by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Adapter,
    SPrompt,
    Iqkm,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Adapter => "adapter",
            AblationAxis::SPrompt => "s-prompt",
            AblationAxis::Iqkm => "iqkm",
        }
    }

    /// Whether the switch leaves training untouched.
    pub fn inference_only(self) -> bool {
        self == AblationAxis::Iqkm
    }

    fn disable(self, cfg: &mut ExperimentConfig) {
        match self {
            AblationAxis::Adapter => {
                cfg.method.use_adapter = false;
                cfg.backbone.adapter_layers = None;
            }
            AblationAxis::SPrompt => cfg.method.use_semantic_prompt = false,
            AblationAxis::Iqkm => cfg.method.iqkm = IqkmMode::MultiKeyOnly,
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = AespError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(AblationAxis::Adapter),
            "s-prompt" => Ok(AblationAxis::SPrompt),
            "iqkm" => Ok(AblationAxis::Iqkm),
            other => Err(AespError::Config(format!(
                "unknown ablation axis {other:?}; expected adapter, s-prompt or iqkm"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub full: RunSummary,
    pub without: RunSummary,
    /// Whether every task bundle of every seed hashes identically in both runs.
    pub identical_bundles: bool,
}

impl AblationReport {
    /// Side-by-side table, one row per metric.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let row = |name: &str, a: Option<f64>, b: Option<f64>| {
            let delta = a.zip(b).map(|(a, b)| b - a);
            format!("| {name} | {} | {} | {} |\n", fmt(a), fmt(b), fmt(delta))
        };
        let sel = |s: &RunSummary, mode: IqkmMode| Some(s.selection_accuracy(mode));
        let (f, w) = (&self.full, &self.without);
        let mut out = format!("| metric | full | w/o {} | delta |\n|---|---|---|---|\n", self.axis.name());
        out += &row("last_acc", Some(f.mean_last_acc), Some(w.mean_last_acc));
        out += &row("avg_acc", Some(f.mean_avg_acc), Some(w.mean_avg_acc));
        out += &row("forgetting", f.mean_forgetting, w.mean_forgetting);
        let full_mode = self.full_mode();
        let without_mode = self.without_mode();
        out += &row("selection_acc", sel(f, full_mode), sel(w, without_mode));
        out += &format!("\nidentical bundle checksums: {}\n", self.identical_bundles);
        out
    }

    fn full_mode(&self) -> IqkmMode {
        IqkmMode::Full
    }

    fn without_mode(&self) -> IqkmMode {
        match self.axis {
            AblationAxis::Iqkm => IqkmMode::MultiKeyOnly,
            _ => IqkmMode::Full,
        }
    }

    /// Selection accuracy of the full and the ablated variant, each under its
    /// own routing strategy.
    pub fn selection_pair(&self) -> (f64, f64) {
        (
            self.full.selection_accuracy(self.full_mode()),
            self.without.selection_accuracy(self.without_mode()),
        )
    }
}

fn bundle_hashes(run_dir: &Path, seeds: &[u64]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(read_index(&bundles_dir(run_dir, s))?.bundles.into_iter().map(|b| b.sha256));
    }
    Ok(out)
}

/// Runs `cfg` with the axis switched on and off, under
/// `<output_dir>/ablate-<axis>/{full,without}`.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<AblationReport> {
    let root = cfg.output_dir.join(format!("ablate-{}", axis.name()));
    let mut full_cfg = cfg.clone();
    full_cfg.output_dir = root.join("full");
    full_cfg.method.use_adapter = true;
    full_cfg.method.use_semantic_prompt = true;
    full_cfg.method.iqkm = IqkmMode::Full;
    let mut without_cfg = full_cfg.clone();
    without_cfg.output_dir = root.join("without");
    axis.disable(&mut without_cfg);
    let full = train(&full_cfg)?;
    let without = train(&without_cfg)?;
    let identical_bundles =
        bundle_hashes(&full_cfg.output_dir, &cfg.seeds)? == bundle_hashes(&without_cfg.output_dir, &cfg.seeds)?;
    let report = AblationReport {
        axis,
        full,
        without,
        identical_bundles,
    };
    fs::write(root.join("comparison.md"), report.table()).map_err(|e| AespError::io(&root, e))?;
    write_json(&root.join("comparison.json"), &report)?;
    Ok(report)
}

/// Encodes every template the config's protocol needs into a cache at `out`,
/// keeping entries already there. Returns the number of new entries.
pub fn build_embed_cache(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    if let EncoderSource::Cache { .. } = cfg.encoder.source {
        return Err(AespError::Config(
            "encoder.source.cache cannot build a cache; configure a fixture or live encoder".into(),
        ));
    }
    let encoder = cfg.build_encoder()?;
    let names = class_names(&cfg.dataset)?;
    let ids: Vec<usize> = (0..names.len()).collect();
    let labels = split_tasks(&ids, &cfg.protocol)?;
    let mut cache = if out.join("manifest.toml").exists() {
        let c = EmbeddingCache::load(out)?;
        if c.encoder_name != encoder.name() || c.d_text != encoder.dim() {
            return Err(AespError::Config(format!(
                "{} holds embeddings from {} (dim {}), not {} (dim {})",
                out.display(),
                c.encoder_name,
                c.d_text,
                encoder.name(),
                encoder.dim()
            )));
        }
        c
    } else {
        EmbeddingCache::new(encoder.name(), encoder.dim(), encoder.pooling())
    };
    let templates = templates_for(&task_names(&labels, &names))?;
    let added = cache.populate(encoder.as_ref(), templates.iter().map(String::as_str))?;
    cache.save(out)?;
    Ok(added)
}

/// Checkpointed pool of one seed.
pub fn load_seed_pool(run_dir: &Path, seed: u64) -> Result<PromptPool> {
    load_pool(&bundles_dir(run_dir, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_config;
    use crate::data::DatasetSource;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut c = toy_config(dir);
        c.protocol.total_classes = 4;
        if let DatasetSource::Synthetic(s) = &mut c.dataset.source {
            s.num_classes = 4;
            s.train_per_class = 6;
            s.test_per_class = 3;
        }
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(AespError::Protocol(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn train_writes_a_self_describing_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("run"));
        let summary = train(&cfg).unwrap();
        let run = &cfg.output_dir;
        for f in [MANIFEST, SUMMARY] {
            assert!(run.join(f).exists(), "{f}");
        }
        let seed = seed_dir(run, 0);
        for f in [
            "metrics.json",
            "selection_records.jsonl",
            "bundles/pool.toml",
            "bundles/task_002.safetensors",
            "sessions/session_2.json",
            "sessions/losses_1.jsonl",
            "exports/metrics.csv",
            "exports/selection_full.png",
        ] {
            assert!(seed.join(f).exists(), "{f}");
        }
        assert!(!run.join(LOCK).exists());
        assert_eq!(Manifest::read(run).unwrap().config, cfg);
        let again = eval(run, false).unwrap();
        assert_eq!(again.seeds, summary.seeds);
    }

    #[test]
    fn different_config_in_same_dir_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("run"));
        train(&cfg).unwrap();
        let mut other = cfg.clone();
        other.train.epochs = 3;
        assert!(matches!(train(&other), Err(AespError::Config(_))));
    }

    #[test]
    fn cache_build_then_offline_use() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("run"));
        let cache_dir = dir.path().join("cache");
        assert_eq!(build_embed_cache(&cfg, &cache_dir).unwrap(), 6);
        assert_eq!(build_embed_cache(&cfg, &cache_dir).unwrap(), 0);
        let mut offline = cfg.clone();
        offline.encoder.source = EncoderSource::Cache { path: cache_dir.clone() };
        let enc = offline.build_encoder().unwrap();
        let fixture = cfg.build_encoder().unwrap();
        let names = vec![vec!["cat".to_string(), "dog".to_string()]];
        let proj = Projection::seeded(48, 32, 0);
        assert_eq!(
            build_semantics(enc.as_ref(), &proj, &names).unwrap(),
            build_semantics(fixture.as_ref(), &proj, &names).unwrap()
        );
        let missing = vec![vec!["cat".to_string(), "zebra".to_string()]];
        match build_semantics(enc.as_ref(), &proj, &missing) {
            Err(AespError::MissingEmbedding(m)) => assert_eq!(m.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn axis_names_parse() {
        for a in [AblationAxis::Adapter, AblationAxis::SPrompt, AblationAxis::Iqkm] {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
    }
}
