//! Experiment configuration: a strict TOML schema covering the protocol,
//! optimizer, backbone, text encoder, dataset and method switches.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PromptAttention};
use crate::data::DatasetSpec;
use crate::error::{AespError, Result};
use crate::tensors::sha256_hex;
use crate::text::{CachingEncoder, EmbeddingCache, FixtureEncoder, TextEncoder};
use crate::trainer::{MethodConfig, ProtocolSpec, TrainConfig};

pub const OUTPUT_DIR_ENV: &str = "AESP_OUTPUT_DIR";
pub const SEED_ENV: &str = "AESP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub method: MethodConfig,
    pub backbone: BackboneSection,
    pub encoder: EncoderSection,
    pub dataset: DatasetSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub provider: BackboneProvider,
    /// Layers carrying an adapter; omitted means every layer.
    #[serde(default)]
    pub adapter_layers: Option<BTreeSet<usize>>,
    pub adapter_dim: usize,
    #[serde(default)]
    pub prompt_attention: PromptAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneProvider {
    Toy(ToyBackbone),
    Pretrained(PretrainedBackbone),
}

/// Seeded random transformer; geometry defaults to the desk-scale preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyBackbone {
    pub seed: u64,
    #[serde(default = "toy_layers")]
    pub num_layers: usize,
    #[serde(default = "toy_dim")]
    pub embed_dim: usize,
    #[serde(default = "toy_heads")]
    pub num_heads: usize,
    #[serde(default = "toy_mlp")]
    pub mlp_dim: usize,
    #[serde(default = "toy_image")]
    pub image_size: usize,
    #[serde(default = "toy_patch")]
    pub patch_size: usize,
    #[serde(default = "toy_channels")]
    pub channels: usize,
}

fn toy_layers() -> usize {
    BackboneConfig::toy().num_layers
}
fn toy_dim() -> usize {
    BackboneConfig::toy().embed_dim
}
fn toy_heads() -> usize {
    BackboneConfig::toy().num_heads
}
fn toy_mlp() -> usize {
    BackboneConfig::toy().mlp_dim
}
fn toy_image() -> usize {
    BackboneConfig::toy().image_size
}
fn toy_patch() -> usize {
    BackboneConfig::toy().patch_size
}
fn toy_channels() -> usize {
    BackboneConfig::toy().channels
}

/// ViT checkpoint in safetensors format; geometry is read from the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedBackbone {
    pub path: PathBuf,
    #[serde(default = "vit_heads")]
    pub num_heads: usize,
    /// Expected SHA-256 of the weights; checked at load when present.
    #[serde(default)]
    pub sha256: Option<String>,
}

fn vit_heads() -> usize {
    BackboneConfig::vit_base().num_heads
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub source: EncoderSource,
    /// Seed of the fixed projection used when encoder and backbone widths differ.
    #[serde(default)]
    pub projection_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    /// Deterministic hash-seeded vectors.
    Fixture { seed: u64, dim: usize },
    /// Precomputed embeddings; every template must be present.
    Cache { path: PathBuf },
    /// A named live encoder, optionally backed by a cache.
    Live {
        name: String,
        dim: usize,
        #[serde(default)]
        cache: Option<PathBuf>,
    },
}

/// Resolves a live encoder by name. Only hash-seeded fixtures
/// (`fixture-<seed>`) ship with this build; real sentence encoders are used
/// through embedding caches produced elsewhere.
pub fn live_encoder(name: &str, dim: usize) -> Result<Box<dyn TextEncoder>> {
    match name.strip_prefix("fixture-").and_then(|s| s.parse::<u64>().ok()) {
        Some(seed) => Ok(Box::new(FixtureEncoder::new(seed, dim))),
        None => Err(AespError::Config(format!(
            "encoder.source.live.name = {name:?} is not available in this build; \
             build an embedding cache and use encoder.source.cache"
        ))),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AespError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            AespError::Config(m) => AespError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Applies `AESP_OUTPUT_DIR` and `AESP_SEED` from `lookup`.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = lookup(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(seed) = lookup(SEED_ENV) {
            let s = seed
                .trim()
                .parse::<u64>()
                .map_err(|_| AespError::Config(format!("{SEED_ENV} = {seed:?} is not an unsigned integer")))?;
            self.seeds = vec![s];
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: AespError| match e {
            AespError::Config(m) => AespError::Config(format!("{name}: {m}")),
            other => other,
        };
        if self.seeds.is_empty() {
            return Err(AespError::Config("seeds: at least one seed is required".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(AespError::Config("seeds: duplicate seed".into()));
        }
        self.protocol.validate().map_err(|e| field("protocol", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.method.validate().map_err(|e| field("method", e))?;
        if let BackboneProvider::Toy(_) = &self.backbone.provider {
            self.backbone_config()?.validate().map_err(|e| field("backbone", e))?;
        }
        if let (false, Some(layers)) = (self.method.use_adapter, &self.backbone.adapter_layers) {
            if !layers.is_empty() {
                return Err(AespError::Config(
                    "backbone.adapter_layers must be empty or omitted when method.use_adapter = false".into(),
                ));
            }
        }
        match &self.encoder.source {
            EncoderSource::Fixture { dim, .. } | EncoderSource::Live { dim, .. } if *dim == 0 => {
                return Err(AespError::Config("encoder.source: dim must be > 0".into()));
            }
            _ => {}
        }
        if let crate::data::DatasetSource::Synthetic(s) = &self.dataset.source {
            if s.num_classes != self.protocol.total_classes {
                return Err(AespError::Config(format!(
                    "dataset.source.synthetic.num_classes = {} but protocol.total_classes = {}",
                    s.num_classes, self.protocol.total_classes
                )));
            }
            if let BackboneProvider::Toy(t) = &self.backbone.provider {
                if s.image_size != t.image_size || s.channels != t.channels {
                    return Err(AespError::Config(format!(
                        "dataset images are {}x{}x{} but the backbone expects {}x{}x{}",
                        s.channels, s.image_size, s.image_size, t.channels, t.image_size, t.image_size
                    )));
                }
            }
        }
        Ok(())
    }

    fn adapter_layers(&self) -> Option<BTreeSet<usize>> {
        if self.method.use_adapter {
            self.backbone.adapter_layers.clone()
        } else {
            Some(BTreeSet::new())
        }
    }

    /// Backbone geometry for the toy provider. Pretrained geometry comes from
    /// the checkpoint, see [`ExperimentConfig::build_backbone`].
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let base = match &self.backbone.provider {
            BackboneProvider::Toy(t) => BackboneConfig {
                num_layers: t.num_layers,
                embed_dim: t.embed_dim,
                num_heads: t.num_heads,
                mlp_dim: t.mlp_dim,
                image_size: t.image_size,
                patch_size: t.patch_size,
                channels: t.channels,
                ..BackboneConfig::toy()
            },
            BackboneProvider::Pretrained(p) => BackboneConfig {
                num_heads: p.num_heads,
                ..BackboneConfig::vit_base()
            },
        };
        Ok(BackboneConfig {
            adapter_layers: self.adapter_layers(),
            adapter_dim: self.backbone.adapter_dim,
            prompt_attention: self.backbone.prompt_attention,
            ..base
        })
    }

    pub fn build_backbone(&self) -> Result<Backbone> {
        let cfg = self.backbone_config()?;
        match &self.backbone.provider {
            BackboneProvider::Toy(t) => Backbone::toy(cfg, t.seed),
            BackboneProvider::Pretrained(p) => {
                let bb = Backbone::load_checkpoint(&p.path, &cfg)?;
                if let Some(expected) = &p.sha256 {
                    let found = bb.checksum();
                    if &found != expected {
                        return Err(AespError::Checksum {
                            path: p.path.clone(),
                            expected: expected.clone(),
                            found,
                        });
                    }
                }
                Ok(bb)
            }
        }
    }

    /// Encoder described by the config. Cache-only encoders never compute
    /// new embeddings.
    pub fn build_encoder(&self) -> Result<Box<dyn TextEncoder>> {
        match &self.encoder.source {
            EncoderSource::Fixture { seed, dim } => Ok(Box::new(FixtureEncoder::new(*seed, *dim))),
            EncoderSource::Cache { path } => Ok(Box::new(CachingEncoder::offline(EmbeddingCache::load(path)?))),
            EncoderSource::Live { name, dim, cache } => {
                let live = live_encoder(name, *dim)?;
                match cache {
                    Some(path) if path.join("manifest.toml").exists() => {
                        Ok(Box::new(CachingEncoder::with_live(EmbeddingCache::load(path)?, live)?))
                    }
                    _ => Ok(live),
                }
            }
        }
    }
}

/// Desk-scale configuration matching `configs/toy.toml`.
pub fn toy_config(output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    use crate::data::{DatasetSource, SyntheticSpec};
    let geometry = BackboneConfig::toy();
    ExperimentConfig {
        output_dir: output_dir.into(),
        seeds: vec![0],
        protocol: ProtocolSpec {
            total_classes: 10,
            classes_per_task: 2,
            class_order_seed: None,
        },
        train: TrainConfig {
            learning_rate: 0.05,
            epochs: 50,
            ..TrainConfig::default()
        },
        method: MethodConfig {
            visual_prompt_len: 4,
            ..MethodConfig::default()
        },
        backbone: BackboneSection {
            provider: BackboneProvider::Toy(ToyBackbone {
                seed: 0,
                num_layers: geometry.num_layers,
                embed_dim: geometry.embed_dim,
                num_heads: geometry.num_heads,
                mlp_dim: geometry.mlp_dim,
                image_size: geometry.image_size,
                patch_size: geometry.patch_size,
                channels: geometry.channels,
            }),
            adapter_layers: None,
            adapter_dim: geometry.adapter_dim,
            prompt_attention: PromptAttention::Full,
        },
        encoder: EncoderSection {
            source: EncoderSource::Fixture { seed: 0, dim: 48 },
            projection_seed: 0,
        },
        dataset: DatasetSpec {
            name: "synthetic".into(),
            source: DatasetSource::Synthetic(SyntheticSpec {
                num_classes: 10,
                train_per_class: 30,
                test_per_class: 10,
                image_size: geometry.image_size,
                channels: geometry.channels,
                margin: 8.0,
                noise: 1.0,
                seed: 0,
            }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
output_dir = "runs/toy"
seeds = [0, 1]

[protocol]
total_classes = 10
classes_per_task = 2

[method]
visual_prompt_len = 4

[backbone]
adapter_dim = 8

[backbone.provider.toy]
seed = 0

[encoder.source.fixture]
seed = 0
dim = 48

[dataset]
name = "synthetic"

[dataset.source.synthetic]
num_classes = 10
train_per_class = 30
test_per_class = 10
image_size = 8
margin = 8.0
seed = 0
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(c.seeds, vec![0, 1]);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.method.alpha, 0.3);
        let bb = c.backbone_config().unwrap();
        assert_eq!(bb, BackboneConfig::toy());
    }

    #[test]
    fn round_trip_is_stable() {
        let c = ExperimentConfig::from_toml(TOY).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let toy = toy_config("x");
        assert_eq!(ExperimentConfig::from_toml(&toy.to_toml().unwrap()).unwrap(), toy);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let text = TOY.replace("visual_prompt_len = 4", "visual_prompt_len = 4\nprompt_len = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(&err, AespError::Config(m) if m.contains("prompt_len")), "{err}");
    }

    #[test]
    fn indivisible_protocol_is_a_config_error() {
        let text = TOY.replace("classes_per_task = 2", "classes_per_task = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(&err, AespError::Config(m) if m.contains("protocol")));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn dataset_must_match_protocol_and_backbone() {
        let text = TOY.replace("num_classes = 10", "num_classes = 12");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = TOY.replace("image_size = 8", "image_size = 12");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn adapter_switch_clears_adapter_layers() {
        let mut c = ExperimentConfig::from_toml(TOY).unwrap();
        c.method.use_adapter = false;
        assert!(c.backbone_config().unwrap().resolved_adapter_layers().is_empty());
        c.backbone.adapter_layers = Some([0].into_iter().collect());
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_replace_output_and_seed() {
        let mut c = ExperimentConfig::from_toml(TOY).unwrap();
        c.apply_overrides(|k| match k {
            OUTPUT_DIR_ENV => Some("/tmp/elsewhere".into()),
            SEED_ENV => Some("7".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(c.seeds, vec![7]);
        assert!(c.apply_overrides(|k| (k == SEED_ENV).then(|| "x".into())).is_err());
    }

    #[test]
    fn unknown_live_encoder_is_a_config_error() {
        assert!(live_encoder("fixture-3", 8).is_ok());
        assert!(matches!(live_encoder("bert-base", 768), Err(AespError::Config(_))));
    }
}
