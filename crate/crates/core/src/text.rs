//! Text templates, pluggable text encoders and the on-disk embedding cache.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AespError, Result};
use crate::model::stack_rows;
use crate::tensors::{self, ArrayMap, NamedArray};

/// Task-level description `"A photo of a or b or c."`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskTemplate(pub String);

/// Class-level description `"A photo of a."`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassTemplate(pub String);

pub fn build_task_template<S: AsRef<str>>(class_names: &[S]) -> Result<TaskTemplate> {
    if class_names.is_empty() {
        return Err(AespError::Protocol("task template needs at least one class".into()));
    }
    if class_names.iter().any(|n| n.as_ref().is_empty()) {
        return Err(AespError::Protocol("class names must be non-empty".into()));
    }
    let joined = class_names
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" or ");
    Ok(TaskTemplate(format!("A photo of {joined}.")))
}

pub fn build_class_template(class_name: &str) -> Result<ClassTemplate> {
    if class_name.is_empty() {
        return Err(AespError::Protocol("class name must be non-empty".into()));
    }
    Ok(ClassTemplate(format!("A photo of {class_name}.")))
}

/// A sentence encoder producing one pooled vector per text.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// How token states are pooled into the single vector (recorded in caches).
    fn pooling(&self) -> &str;
    fn encode(&self, text: &str) -> Result<Array1<f64>>;
}

/// Deterministic stand-in encoder: SHA-256 of `(seed, text)` seeds a
/// standard normal vector. Distinct texts give distinct vectors.
#[derive(Debug, Clone)]
pub struct FixtureEncoder {
    seed: u64,
    dim: usize,
    name: String,
}

impl FixtureEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        FixtureEncoder {
            seed,
            dim,
            name: format!("fixture-{seed}"),
        }
    }
}

impl TextEncoder for FixtureEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> &str {
        "hash-seeded"
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(Array1::from_shape_fn(self.dim, |_| n.sample(&mut rng)))
    }
}

/// Exact-string map from template text to embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub encoder_name: String,
    pub d_text: usize,
    pub pooling: String,
    entries: BTreeMap<String, Array1<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    encoder_name: String,
    d_text: usize,
    pooling: String,
    /// array key → template text
    entries: BTreeMap<String, String>,
}

const CACHE_MANIFEST: &str = "manifest.toml";
const CACHE_ARRAYS: &str = "embeddings.safetensors";

/// Stable array key for a template text.
pub fn text_key(text: &str) -> String {
    tensors::sha256_hex(text.as_bytes())[..16].to_string()
}

impl EmbeddingCache {
    pub fn new(encoder_name: impl Into<String>, d_text: usize, pooling: impl Into<String>) -> Self {
        EmbeddingCache {
            encoder_name: encoder_name.into(),
            d_text,
            pooling: pooling.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, text: &str) -> Option<&Array1<f64>> {
        self.entries.get(text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, text: impl Into<String>, v: Array1<f64>) -> Result<()> {
        if v.len() != self.d_text {
            return Err(AespError::Config(format!(
                "embedding width {} does not match cache width {}",
                v.len(),
                self.d_text
            )));
        }
        self.entries.insert(text.into(), v);
        Ok(())
    }

    /// Encodes and stores every text not already present.
    pub fn populate<'a>(
        &mut self,
        encoder: &dyn TextEncoder,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<usize> {
        let mut added = 0;
        for t in texts {
            if !self.entries.contains_key(t) {
                let v = encoder.encode(t)?;
                self.insert(t, v)?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AespError::io(dir, e))?;
        let mut arrays = ArrayMap::new();
        let mut names = BTreeMap::new();
        for (text, v) in &self.entries {
            let key = text_key(text);
            if let Some(prev) = names.insert(key.clone(), text.clone()) {
                return Err(AespError::Serialization(format!(
                    "template key collision between {prev:?} and {text:?}"
                )));
            }
            arrays.insert(key, NamedArray::from_array1(v));
        }
        tensors::write_file(&dir.join(CACHE_ARRAYS), &arrays)?;
        let manifest = CacheManifest {
            encoder_name: self.encoder_name.clone(),
            d_text: self.d_text,
            pooling: self.pooling.clone(),
            entries: names,
        };
        let path = dir.join(CACHE_MANIFEST);
        std::fs::write(&path, toml::to_string(&manifest)?).map_err(|e| AespError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CACHE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| AespError::io(&path, e))?;
        let manifest: CacheManifest = toml::from_str(&text)?;
        let mut arrays = tensors::read_file(&dir.join(CACHE_ARRAYS))?;
        let mut cache = EmbeddingCache::new(manifest.encoder_name, manifest.d_text, manifest.pooling);
        for (key, template) in manifest.entries {
            let v = tensors::take(&mut arrays, &key)?.into_array1(&key)?;
            cache.insert(template, v)?;
        }
        Ok(cache)
    }
}

/// Encoder backed by an [`EmbeddingCache`], optionally falling back to a live
/// encoder whose results are written into the cache.
pub struct CachingEncoder {
    name: String,
    cache: RwLock<EmbeddingCache>,
    live: Option<Box<dyn TextEncoder>>,
}

impl CachingEncoder {
    pub fn offline(cache: EmbeddingCache) -> Self {
        CachingEncoder {
            name: cache.encoder_name.clone(),
            cache: RwLock::new(cache),
            live: None,
        }
    }

    pub fn with_live(cache: EmbeddingCache, live: Box<dyn TextEncoder>) -> Result<Self> {
        if live.dim() != cache.d_text || live.name() != cache.encoder_name {
            return Err(AespError::Config(format!(
                "live encoder {} (dim {}) does not match cache {} (dim {})",
                live.name(),
                live.dim(),
                cache.encoder_name,
                cache.d_text
            )));
        }
        Ok(CachingEncoder {
            name: cache.encoder_name.clone(),
            cache: RwLock::new(cache),
            live: Some(live),
        })
    }

    pub fn snapshot(&self) -> EmbeddingCache {
        self.cache.read().expect("cache lock").clone()
    }

    /// Checks all texts resolve, reporting every miss at once.
    pub fn require<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<()> {
        if self.live.is_some() {
            return Ok(());
        }
        let cache = self.cache.read().expect("cache lock");
        let missing: Vec<String> = texts
            .into_iter()
            .filter(|t| cache.get(t).is_none())
            .map(String::from)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(AespError::MissingEmbedding(missing))
        }
    }
}

impl TextEncoder for CachingEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.cache.read().expect("cache lock").d_text
    }

    fn pooling(&self) -> &str {
        "cached"
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        if let Some(v) = self.cache.read().expect("cache lock").get(text) {
            return Ok(v.clone());
        }
        let Some(live) = &self.live else {
            return Err(AespError::MissingEmbedding(vec![text.to_string()]));
        };
        let v = live.encode(text)?;
        self.cache.write().expect("cache lock").insert(text, v.clone())?;
        Ok(v)
    }
}

pub fn encode(text: &str, encoder: &dyn TextEncoder) -> Result<Array1<f64>> {
    let v = encoder.encode(text)?;
    if v.len() != encoder.dim() || v.iter().any(|x| !x.is_finite()) {
        return Err(AespError::Numerical(format!(
            "encoder {} returned an invalid vector for {text:?}",
            encoder.name()
        )));
    }
    Ok(v)
}

/// Fixed linear map from encoder width to backbone width, `out = M · e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    matrix: Option<Array2<f64>>,
    d: usize,
}

impl Projection {
    /// Pass-through; only valid when the encoder width equals `d`.
    pub fn identity(d: usize) -> Self {
        Projection { matrix: None, d }
    }

    /// Explicit `d × d_text` matrix.
    pub fn from_matrix(matrix: Array2<f64>) -> Self {
        Projection {
            d: matrix.nrows(),
            matrix: Some(matrix),
        }
    }

    /// Identity when widths agree, otherwise a seeded map with orthonormal
    /// rows (or columns, when widening).
    pub fn seeded(d_text: usize, d: usize, seed: u64) -> Self {
        if d_text == d {
            return Self::identity(d);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let (count, len) = if d <= d_text { (d, d_text) } else { (d_text, d) };
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
        while basis.len() < count {
            let mut v = Array1::from_shape_fn(len, |_| n.sample(&mut rng));
            for b in &basis {
                let c = v.dot(b);
                v.scaled_add(-c, b);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                basis.push(v / norm);
            }
        }
        let m = stack_rows(&basis, len);
        Projection::from_matrix(if d <= d_text { m } else { m.reversed_axes().as_standard_layout().to_owned() })
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn project(&self, e: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.matrix {
            None if e.len() == self.d => Ok(e.to_owned()),
            None => Err(AespError::Config(format!(
                "no projection configured from width {} to {}",
                e.len(),
                self.d
            ))),
            Some(m) if m.ncols() == e.len() => Ok(m.dot(&e)),
            Some(m) => Err(AespError::Config(format!(
                "projection expects width {}, got {}",
                m.ncols(),
                e.len()
            ))),
        }
    }
}

/// Semantic prompt and per-class semantic embeddings of one task, already in
/// backbone width.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSemantics {
    pub prompt: Array1<f64>,
    pub class_embeddings: Array2<f64>,
}

pub fn task_semantics<S: AsRef<str>>(
    class_names: &[S],
    encoder: &dyn TextEncoder,
    projection: &Projection,
) -> Result<TaskSemantics> {
    let task = build_task_template(class_names)?;
    let prompt = projection.project(encode(&task.0, encoder)?.view())?;
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let t = build_class_template(name.as_ref())?;
        rows.push(projection.project(encode(&t.0, encoder)?.view())?);
    }
    Ok(TaskSemantics {
        class_embeddings: stack_rows(&rows, projection.output_dim()),
        prompt,
    })
}

/// Every template text a class list will need, task-level then class-level.
pub fn templates_for<S: AsRef<str>>(tasks: &[Vec<S>]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for names in tasks {
        out.push(build_task_template(names)?.0);
        for n in names {
            out.push(build_class_template(n.as_ref())?.0);
        }
    }
    Ok(out)
}
