use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Backbone, BackboneConfig};
use crate::error::{AespError, Result};
use crate::tensors::{self, take, ArrayMap, NamedArray};

/// Weights of one pre-norm transformer block. Linear maps are stored
/// `in × out` and applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    /// `patch_dim × d`, patch pixels flattened in (channel, row, col) order.
    pub patch_weight: Array2<f64>,
    pub patch_bias: Array1<f64>,
    pub cls_token: Array1<f64>,
    /// `(1 + L_img) × d`, covering the class token and image tokens only.
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Array1<f64>,
    pub final_beta: Array1<f64>,
}

impl Backbone {
    /// Deterministic random transformer generated from `seed`.
    pub fn toy(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
        };
        let patch_weight = gauss(config.patch_dim(), d, 1.0 / (config.patch_dim() as f64).sqrt());
        let patch_bias = gauss(1, d, 0.02).row(0).to_owned();
        let cls_token = gauss(1, d, 0.02).row(0).to_owned();
        let pos_embed = gauss(1 + config.num_image_tokens(), d, 0.02);
        let inv_d = 1.0 / (d as f64).sqrt();
        let inv_mlp = 1.0 / (config.mlp_dim as f64).sqrt();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                ln1_gamma: gauss(1, d, 0.1).row(0).mapv(|v| 1.0 + v),
                ln1_beta: gauss(1, d, 0.05).row(0).to_owned(),
                wq: gauss(d, d, inv_d),
                bq: gauss(1, d, 0.02).row(0).to_owned(),
                wk: gauss(d, d, inv_d),
                bk: gauss(1, d, 0.02).row(0).to_owned(),
                wv: gauss(d, d, inv_d),
                bv: gauss(1, d, 0.02).row(0).to_owned(),
                wo: gauss(d, d, inv_d),
                bo: gauss(1, d, 0.02).row(0).to_owned(),
                ln2_gamma: gauss(1, d, 0.1).row(0).mapv(|v| 1.0 + v),
                ln2_beta: gauss(1, d, 0.05).row(0).to_owned(),
                w1: gauss(d, config.mlp_dim, inv_d),
                b1: gauss(1, config.mlp_dim, 0.02).row(0).to_owned(),
                w2: gauss(config.mlp_dim, d, inv_mlp),
                b2: gauss(1, d, 0.02).row(0).to_owned(),
            });
        }
        Ok(Backbone {
            weights: BackboneWeights {
                patch_weight,
                patch_bias,
                cls_token,
                pos_embed,
                layers,
                final_gamma: Array1::ones(d),
                final_beta: Array1::zeros(d),
            },
            config,
        })
    }

    /// Loads a ViT checkpoint that uses the common `timm` tensor names
    /// (`cls_token`, `pos_embed`, `patch_embed.proj.*`, `blocks.{i}.*`,
    /// `norm.*`). Geometry is inferred from the tensors; heads, adapter
    /// settings and the attention mode come from `template`.
    pub fn load_checkpoint(path: &Path, template: &BackboneConfig) -> Result<Self> {
        let arrays = tensors::read_file(path)?;
        Self::from_arrays(arrays, template)
    }

    pub fn from_arrays(mut m: ArrayMap, template: &BackboneConfig) -> Result<Self> {
        let cls = take(&mut m, "cls_token")?;
        let d = *cls.shape.last().unwrap_or(&0);
        let cls_token = Array1::from(cls.data);
        let pos = take(&mut m, "pos_embed")?;
        let pos_rows = pos.data.len() / d.max(1);
        let pos_embed = Array2::from_shape_vec((pos_rows, d), pos.data)
            .map_err(|e| AespError::Serialization(format!("pos_embed: {e}")))?;
        let pw = take(&mut m, "patch_embed.proj.weight")?;
        if pw.shape.len() != 4 || pw.shape[0] != d || pw.shape[2] != pw.shape[3] {
            return Err(AespError::Serialization(format!(
                "patch_embed.proj.weight has shape {:?}",
                pw.shape
            )));
        }
        let (channels, patch) = (pw.shape[1], pw.shape[2]);
        let patch_dim = channels * patch * patch;
        let patch_weight = Array2::from_shape_vec((d, patch_dim), pw.data)
            .map_err(|e| AespError::Serialization(e.to_string()))?
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        let patch_bias = take(&mut m, "patch_embed.proj.bias")?.into_array1("patch bias")?;

        let mut layers = Vec::new();
        while m.contains_key(&format!("blocks.{}.norm1.weight", layers.len())) {
            let p = format!("blocks.{}", layers.len());
            let mut vec = |name: &str| take(&mut m, &format!("{p}.{name}"))?.into_array1(name);
            let ln1_gamma = vec("norm1.weight")?;
            let ln1_beta = vec("norm1.bias")?;
            let qkv_b = vec("attn.qkv.bias")?;
            let proj_b = vec("attn.proj.bias")?;
            let ln2_gamma = vec("norm2.weight")?;
            let ln2_beta = vec("norm2.bias")?;
            let b1 = vec("mlp.fc1.bias")?;
            let b2 = vec("mlp.fc2.bias")?;
            let mut linear = |name: &str| -> Result<Array2<f64>> {
                // torch Linear stores out × in
                Ok(take(&mut m, &format!("{p}.{name}"))?
                    .into_array2(name)?
                    .reversed_axes()
                    .as_standard_layout()
                    .to_owned())
            };
            let qkv = linear("attn.qkv.weight")?;
            let wo = linear("attn.proj.weight")?;
            let w1 = linear("mlp.fc1.weight")?;
            let w2 = linear("mlp.fc2.weight")?;
            if qkv.dim() != (d, 3 * d) {
                return Err(AespError::Serialization(format!(
                    "{p}.attn.qkv.weight has in×out shape {:?}",
                    qkv.dim()
                )));
            }
            layers.push(LayerWeights {
                ln1_gamma,
                ln1_beta,
                wq: qkv.slice(s![.., 0..d]).to_owned(),
                wk: qkv.slice(s![.., d..2 * d]).to_owned(),
                wv: qkv.slice(s![.., 2 * d..]).to_owned(),
                bq: qkv_b.slice(s![0..d]).to_owned(),
                bk: qkv_b.slice(s![d..2 * d]).to_owned(),
                bv: qkv_b.slice(s![2 * d..]).to_owned(),
                wo,
                bo: proj_b,
                ln2_gamma,
                ln2_beta,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_gamma = take(&mut m, "norm.weight")?.into_array1("norm.weight")?;
        let final_beta = take(&mut m, "norm.bias")?.into_array1("norm.bias")?;

        let grid = ((pos_rows.saturating_sub(1)) as f64).sqrt().round() as usize;
        if grid * grid + 1 != pos_rows {
            return Err(AespError::Serialization(format!(
                "pos_embed has {pos_rows} rows; expected 1 + square grid"
            )));
        }
        let config = BackboneConfig {
            num_layers: layers.len(),
            embed_dim: d,
            mlp_dim: layers.first().map_or(0, |l| l.b1.len()),
            image_size: grid * patch,
            patch_size: patch,
            channels,
            ..template.clone()
        };
        config.validate()?;
        Ok(Backbone {
            config,
            weights: BackboneWeights {
                patch_weight,
                patch_bias,
                cls_token,
                pos_embed,
                layers,
                final_gamma,
                final_beta,
            },
        })
    }

    /// Inverse of [`Backbone::from_arrays`].
    pub fn to_arrays(&self) -> ArrayMap {
        let w = &self.weights;
        let c = &self.config;
        let d = c.embed_dim;
        let mut m = ArrayMap::new();
        m.insert(
            "cls_token".into(),
            NamedArray {
                shape: vec![1, 1, d],
                data: w.cls_token.to_vec(),
            },
        );
        m.insert(
            "pos_embed".into(),
            NamedArray {
                shape: vec![1, w.pos_embed.nrows(), d],
                data: w.pos_embed.iter().copied().collect(),
            },
        );
        m.insert(
            "patch_embed.proj.weight".into(),
            NamedArray {
                shape: vec![d, c.channels, c.patch_size, c.patch_size],
                data: w.patch_weight.t().iter().copied().collect(),
            },
        );
        m.insert("patch_embed.proj.bias".into(), NamedArray::from_array1(&w.patch_bias));
        let out_in = |a: &Array2<f64>| NamedArray::from_array2(&a.t().to_owned());
        for (i, l) in w.layers.iter().enumerate() {
            let p = format!("blocks.{i}");
            let mut qkv = Array2::zeros((d, 3 * d));
            qkv.slice_mut(s![.., 0..d]).assign(&l.wq);
            qkv.slice_mut(s![.., d..2 * d]).assign(&l.wk);
            qkv.slice_mut(s![.., 2 * d..]).assign(&l.wv);
            let mut qkv_b = Array1::zeros(3 * d);
            qkv_b.slice_mut(s![0..d]).assign(&l.bq);
            qkv_b.slice_mut(s![d..2 * d]).assign(&l.bk);
            qkv_b.slice_mut(s![2 * d..]).assign(&l.bv);
            let entries = [
                ("norm1.weight", NamedArray::from_array1(&l.ln1_gamma)),
                ("norm1.bias", NamedArray::from_array1(&l.ln1_beta)),
                ("attn.qkv.weight", out_in(&qkv)),
                ("attn.qkv.bias", NamedArray::from_array1(&qkv_b)),
                ("attn.proj.weight", out_in(&l.wo)),
                ("attn.proj.bias", NamedArray::from_array1(&l.bo)),
                ("norm2.weight", NamedArray::from_array1(&l.ln2_gamma)),
                ("norm2.bias", NamedArray::from_array1(&l.ln2_beta)),
                ("mlp.fc1.weight", out_in(&l.w1)),
                ("mlp.fc1.bias", NamedArray::from_array1(&l.b1)),
                ("mlp.fc2.weight", out_in(&l.w2)),
                ("mlp.fc2.bias", NamedArray::from_array1(&l.b2)),
            ];
            for (name, arr) in entries {
                m.insert(format!("{p}.{name}"), arr);
            }
        }
        m.insert("norm.weight".into(), NamedArray::from_array1(&w.final_gamma));
        m.insert("norm.bias".into(), NamedArray::from_array1(&w.final_beta));
        m
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        tensors::write_file(path, &self.to_arrays()).map(|_| ())
    }

    /// SHA-256 over the serialized frozen weights.
    pub fn checksum(&self) -> String {
        let bytes = tensors::to_bytes(&self.to_arrays()).expect("backbone arrays serialize");
        tensors::sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic_per_seed() {
        let a = Backbone::toy(BackboneConfig::toy(), 5).unwrap();
        let b = Backbone::toy(BackboneConfig::toy(), 5).unwrap();
        let c = Backbone::toy(BackboneConfig::toy(), 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.safetensors");
        let mut cfg = BackboneConfig::toy();
        cfg.channels = 3;
        let a = Backbone::toy(cfg.clone(), 1).unwrap();
        a.save_checkpoint(&path).unwrap();
        let b = Backbone::load_checkpoint(&path, &BackboneConfig::toy()).unwrap();
        assert_eq!(b.config, cfg);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn loader_reports_missing_tensor() {
        let a = Backbone::toy(BackboneConfig::toy(), 1).unwrap();
        let mut arrays = a.to_arrays();
        arrays.remove("norm.bias");
        let err = Backbone::from_arrays(arrays, &BackboneConfig::toy()).unwrap_err();
        assert!(err.to_string().contains("norm.bias"));
    }
}
