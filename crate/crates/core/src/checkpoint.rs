//! On-disk task bundles: one safetensors file per task plus a TOML index
//! carrying the non-array fields and a SHA-256 per file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::AdapterParams;
use crate::error::{AespError, Result};
use crate::model::{adapter_name, Classifier, PromptPool, TaskBundle, TaskParams};
use crate::tensors::{self, sha256_hex, take, ArrayMap, NamedArray};

pub const POOL_INDEX: &str = "pool.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleEntry {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub file: String,
    pub sha256: String,
    pub semantic_prompt_trainable: bool,
    pub adapter_layers: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolIndex {
    #[serde(default)]
    pub bundles: Vec<BundleEntry>,
}

pub fn bundle_file_name(task_id: usize) -> String {
    format!("task_{task_id:03}.safetensors")
}

pub fn bundle_to_arrays(bundle: &TaskBundle) -> ArrayMap {
    let p = &bundle.params;
    let mut m = ArrayMap::new();
    m.insert("visual_prompt".into(), NamedArray::from_array2(&p.visual_prompt));
    m.insert("semantic_prompt".into(), NamedArray::from_array1(&p.semantic_prompt));
    m.insert("keys".into(), NamedArray::from_array2(&p.keys));
    for a in &p.adapters {
        m.insert(adapter_name(a.layer_index, "down"), NamedArray::from_array2(&a.down));
        m.insert(adapter_name(a.layer_index, "up"), NamedArray::from_array2(&a.up));
    }
    m.insert("classifier.weight".into(), NamedArray::from_array2(&p.classifier.weight));
    m.insert("classifier.bias".into(), NamedArray::from_array1(&p.classifier.bias));
    if let Some(pr) = &bundle.prototypes {
        m.insert("prototypes".into(), NamedArray::from_array2(pr));
    }
    m.insert("class_semantics".into(), NamedArray::from_array2(&bundle.class_semantics));
    m
}

/// Serialized bytes of a bundle's arrays. Deterministic for equal bundles.
pub fn bundle_bytes(bundle: &TaskBundle) -> Result<Vec<u8>> {
    tensors::to_bytes(&bundle_to_arrays(bundle))
}

pub fn bundle_checksum(bundle: &TaskBundle) -> Result<String> {
    Ok(sha256_hex(&bundle_bytes(bundle)?))
}

fn bundle_from_arrays(mut m: ArrayMap, entry: &BundleEntry) -> Result<TaskBundle> {
    let mut adapters = Vec::new();
    for &l in &entry.adapter_layers {
        let down = adapter_name(l, "down");
        let up = adapter_name(l, "up");
        adapters.push(AdapterParams {
            layer_index: l,
            down: take(&mut m, &down)?.into_array2(&down)?,
            up: take(&mut m, &up)?.into_array2(&up)?,
        });
    }
    let prototypes = match m.remove("prototypes") {
        Some(a) => Some(a.into_array2("prototypes")?),
        None => None,
    };
    let bundle = TaskBundle {
        task_id: entry.task_id,
        class_ids: entry.class_ids.clone(),
        params: TaskParams {
            visual_prompt: take(&mut m, "visual_prompt")?.into_array2("visual_prompt")?,
            semantic_prompt: take(&mut m, "semantic_prompt")?.into_array1("semantic_prompt")?,
            keys: take(&mut m, "keys")?.into_array2("keys")?,
            adapters,
            classifier: Classifier {
                weight: take(&mut m, "classifier.weight")?.into_array2("classifier.weight")?,
                bias: take(&mut m, "classifier.bias")?.into_array1("classifier.bias")?,
            },
        },
        semantic_prompt_trainable: entry.semantic_prompt_trainable,
        prototypes,
        class_semantics: take(&mut m, "class_semantics")?.into_array2("class_semantics")?,
    };
    if let Some(extra) = m.keys().next() {
        return Err(AespError::Serialization(format!(
            "{}: unexpected array {extra}",
            entry.file
        )));
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Writes one bundle into `dir` and returns its index entry.
pub fn save_bundle(dir: &Path, bundle: &TaskBundle) -> Result<BundleEntry> {
    fs::create_dir_all(dir).map_err(|e| AespError::io(dir, e))?;
    let file = bundle_file_name(bundle.task_id);
    let bytes = tensors::write_file(&dir.join(&file), &bundle_to_arrays(bundle))?;
    Ok(BundleEntry {
        task_id: bundle.task_id,
        class_ids: bundle.class_ids.clone(),
        file,
        sha256: sha256_hex(&bytes),
        semantic_prompt_trainable: bundle.semantic_prompt_trainable,
        adapter_layers: bundle.params.adapters.iter().map(|a| a.layer_index).collect(),
    })
}

/// Reads one bundle, refusing it if the file's hash differs from the index.
pub fn load_bundle(dir: &Path, entry: &BundleEntry) -> Result<TaskBundle> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| AespError::io(&path, e))?;
    let found = sha256_hex(&bytes);
    if found != entry.sha256 {
        return Err(AespError::Checksum {
            path,
            expected: entry.sha256.clone(),
            found,
        });
    }
    bundle_from_arrays(tensors::from_bytes(&bytes)?, entry)
}

pub fn read_index(dir: &Path) -> Result<PoolIndex> {
    let path = dir.join(POOL_INDEX);
    if !path.exists() {
        return Ok(PoolIndex::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| AespError::io(&path, e))?;
    Ok(toml::from_str(&text)?)
}

pub fn write_index(dir: &Path, index: &PoolIndex) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AespError::io(dir, e))?;
    let path = dir.join(POOL_INDEX);
    fs::write(&path, toml::to_string(index)?).map_err(|e| AespError::io(&path, e))
}

/// Appends `bundle` to the pool stored in `dir`.
pub fn append_bundle(dir: &Path, bundle: &TaskBundle) -> Result<BundleEntry> {
    let mut index = read_index(dir)?;
    let expected = index.bundles.len() + 1;
    if bundle.task_id != expected {
        return Err(AespError::Protocol(format!(
            "checkpoint directory expects task {expected}, got {}",
            bundle.task_id
        )));
    }
    let entry = save_bundle(dir, bundle)?;
    index.bundles.push(entry.clone());
    write_index(dir, &index)?;
    Ok(entry)
}

pub fn save_pool(dir: &Path, pool: &PromptPool) -> Result<PoolIndex> {
    let index = PoolIndex {
        bundles: pool
            .bundles()
            .iter()
            .map(|b| save_bundle(dir, b))
            .collect::<Result<_>>()?,
    };
    write_index(dir, &index)?;
    Ok(index)
}

/// Loads every indexed bundle, verifying checksums.
pub fn load_pool(dir: &Path) -> Result<PromptPool> {
    let index = read_index(dir)?;
    let mut pool = PromptPool::new();
    for entry in &index.bundles {
        pool.push(load_bundle(dir, entry)?)?;
    }
    Ok(pool)
}
