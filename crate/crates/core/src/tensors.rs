//! Named-array container: safetensors on disk, `f64` in memory.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{AespError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_array1(a: &Array1<f64>) -> Self {
        NamedArray {
            shape: vec![a.len()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        NamedArray {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array1(self, name: &str) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(shape_error(name, &self.shape, "rank 1"));
        }
        Ok(Array1::from(self.data))
    }

    pub fn into_array2(self, name: &str) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(shape_error(name, &self.shape, "rank 2"));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data)
            .map_err(|e| AespError::Serialization(format!("{name}: {e}")))
    }

    pub fn into_arrayd(self, name: &str) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data)
            .map_err(|e| AespError::Serialization(format!("{name}: {e}")))
    }
}

fn shape_error(name: &str, shape: &[usize], want: &str) -> AespError {
    AespError::Serialization(format!("array {name} has shape {shape:?}, expected {want}"))
}

pub type ArrayMap = BTreeMap<String, NamedArray>;

/// Serializes every array as little-endian `f64`. Output is deterministic for
/// equal maps.
pub fn to_bytes(arrays: &ArrayMap) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, a)| {
            let bytes = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), a.shape.clone(), bytes)
        })
        .collect();
    let mut views = Vec::with_capacity(raw.len());
    for (name, shape, bytes) in &raw {
        let view = TensorView::new(Dtype::F64, shape.clone(), bytes)?;
        views.push((name.as_str(), view));
    }
    Ok(safetensors::serialize(views, &None)?)
}

/// Reads `f64` and `f32` arrays; other dtypes are rejected.
pub fn from_bytes(bytes: &[u8]) -> Result<ArrayMap> {
    let st = SafeTensors::deserialize(bytes)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(AespError::Serialization(format!(
                    "array {name}: unsupported dtype {other:?}"
                )))
            }
        };
        out.insert(
            name.clone(),
            NamedArray {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok(out)
}

pub fn write_file(path: &Path, arrays: &ArrayMap) -> Result<Vec<u8>> {
    let bytes = to_bytes(arrays)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AespError::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| AespError::io(path, e))?;
    Ok(bytes)
}

pub fn read_file(path: &Path) -> Result<ArrayMap> {
    let bytes = std::fs::read(path).map_err(|e| AespError::io(path, e))?;
    from_bytes(&bytes)
}

pub fn take(map: &mut ArrayMap, name: &str) -> Result<NamedArray> {
    map.remove(name)
        .ok_or_else(|| AespError::Serialization(format!("missing array {name}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
