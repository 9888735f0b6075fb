//! Frozen transformer backbone with per-layer semantic adapters.

mod adapter;
mod forward;
mod weights;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use adapter::{adapter_forward, AdapterParams};
pub use forward::{ForwardOutput, SequenceGrad};
pub use weights::{BackboneWeights, LayerWeights};

use crate::error::{AespError, Result};

/// Whether image tokens may attend to prompt tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptAttention {
    /// Every token attends to every token.
    #[default]
    Full,
    /// Image tokens cannot attend to the semantic or visual prompt positions.
    ImageIsolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Layers that carry a semantic adapter; `None` means every layer.
    #[serde(default)]
    pub adapter_layers: Option<BTreeSet<usize>>,
    pub adapter_dim: usize,
    #[serde(default)]
    pub prompt_attention: PromptAttention,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl BackboneConfig {
    /// Desk-scale toy transformer: 2 layers, d = 32, d' = 8.
    pub fn toy() -> Self {
        BackboneConfig {
            num_layers: 2,
            embed_dim: 32,
            num_heads: 4,
            mlp_dim: 64,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            adapter_layers: None,
            adapter_dim: 8,
            prompt_attention: PromptAttention::Full,
            layer_norm_eps: 1e-6,
        }
    }

    /// ViT-B/16 geometry.
    pub fn vit_base() -> Self {
        BackboneConfig {
            num_layers: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_dim: 3072,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            adapter_layers: None,
            adapter_dim: 64,
            prompt_attention: PromptAttention::Full,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn num_image_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn resolved_adapter_layers(&self) -> BTreeSet<usize> {
        self.adapter_layers
            .clone()
            .unwrap_or_else(|| (0..self.num_layers).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AespError::Config(msg));
        if self.num_layers == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("backbone dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if let Some(layers) = &self.adapter_layers {
            if let Some(l) = layers.iter().find(|&&l| l >= self.num_layers) {
                return bad(format!(
                    "adapter layer {l} outside 0..{}",
                    self.num_layers
                ));
            }
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.embed_dim {
            return bad(format!(
                "adapter bottleneck {} must be in 1..{}",
                self.adapter_dim, self.embed_dim
            ));
        }
        Ok(())
    }
}

/// A backbone: geometry plus frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: BackboneWeights,
}
