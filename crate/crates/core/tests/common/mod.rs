#![allow(dead_code)]

use aesp_core::backbone::{AdapterParams, Backbone, BackboneConfig};
use aesp_core::model::{Classifier, TaskBundle, TaskParams};
use aesp_core::Image;
use aesp_oracle::{Matrix, RefAdapter, RefLayer, RefLayout, RefWeights};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rows(m: &Array2<f64>) -> Matrix {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn ref_weights(bb: &Backbone) -> RefWeights {
    let w = &bb.weights;
    RefWeights {
        layers: w
            .layers
            .iter()
            .map(|l| RefLayer {
                ln1_gamma: l.ln1_gamma.to_vec(),
                ln1_beta: l.ln1_beta.to_vec(),
                wq: rows(&l.wq),
                bq: l.bq.to_vec(),
                wk: rows(&l.wk),
                bk: l.bk.to_vec(),
                wv: rows(&l.wv),
                bv: l.bv.to_vec(),
                wo: rows(&l.wo),
                bo: l.bo.to_vec(),
                ln2_gamma: l.ln2_gamma.to_vec(),
                ln2_beta: l.ln2_beta.to_vec(),
                w1: rows(&l.w1),
                b1: l.b1.to_vec(),
                w2: rows(&l.w2),
                b2: l.b2.to_vec(),
            })
            .collect(),
        final_gamma: w.final_gamma.to_vec(),
        final_beta: w.final_beta.to_vec(),
        num_heads: bb.config.num_heads,
        eps: bb.config.layer_norm_eps,
    }
}

pub fn ref_adapters(adapters: &[AdapterParams]) -> Vec<RefAdapter> {
    adapters
        .iter()
        .map(|a| RefAdapter {
            layer: a.layer_index,
            down: rows(&a.down),
            up: rows(&a.up),
        })
        .collect()
}

pub fn ref_layout(bb: &Backbone, l_vp: usize) -> RefLayout {
    RefLayout {
        image_tokens: bb.config.num_image_tokens(),
        visual_tokens: l_vp,
        isolate_image: bb.config.prompt_attention == aesp_core::PromptAttention::ImageIsolated,
    }
}

pub fn random_image(cfg: &BackboneConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::zeros(cfg.channels, cfg.image_size, cfg.image_size);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    img
}

/// Bundle with every tensor random; adapters on the configured layers with
/// nonzero up-projections unless `zero_up`.
pub fn random_bundle(
    cfg: &BackboneConfig,
    task_id: usize,
    classes: Vec<usize>,
    l_vp: usize,
    seed: u64,
    zero_up: bool,
) -> TaskBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let n = classes.len();
    let mut mat = |r: usize, c: usize, s: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s));
    let visual_prompt = mat(l_vp, d, 1.0);
    let semantic_prompt = mat(1, d, 1.0).row(0).to_owned();
    let keys = mat(n, d, 1.0);
    let weight = mat(d, n, 0.5);
    let bias = mat(1, n, 0.1).row(0).to_owned();
    let prototypes = mat(n, d, 1.0);
    let class_semantics = mat(n, d, 1.0);
    let adapters = cfg
        .resolved_adapter_layers()
        .into_iter()
        .map(|layer_index| AdapterParams {
            layer_index,
            down: mat(d, cfg.adapter_dim, 0.3),
            up: if zero_up {
                Array2::zeros((cfg.adapter_dim, d))
            } else {
                mat(cfg.adapter_dim, d, 0.3)
            },
        })
        .collect();
    TaskBundle {
        task_id,
        class_ids: classes,
        params: TaskParams {
            visual_prompt,
            semantic_prompt,
            keys,
            adapters,
            classifier: Classifier { weight, bias },
        },
        semantic_prompt_trainable: false,
        prototypes: Some(prototypes),
        class_semantics,
    }
}

pub fn flat(a: &Array1<f64>) -> Vec<f64> {
    a.to_vec()
}
