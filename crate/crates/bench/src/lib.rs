//! Seeded fixtures shared by the benchmarks.

use aesp_core::backbone::{AdapterParams, Backbone, BackboneConfig};
use aesp_core::model::{Classifier, PromptPool, TaskBundle, TaskParams};
use aesp_core::objective::PreparedSample;
use aesp_core::Image;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn backbone() -> Backbone {
    Backbone::toy(BackboneConfig::toy(), 0).expect("toy preset is valid")
}

pub fn image(cfg: &BackboneConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::zeros(cfg.channels, cfg.image_size, cfg.image_size);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    img
}

/// A finalized bundle with random tensors and prototypes.
pub fn bundle(cfg: &BackboneConfig, task_id: usize, classes: Vec<usize>, l_vp: usize, seed: u64) -> TaskBundle {
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
            up: mat(cfg.adapter_dim, d, 0.3),
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

/// Pool of `tasks` two-class bundles.
pub fn pool(cfg: &BackboneConfig, tasks: usize) -> PromptPool {
    let mut pool = PromptPool::new();
    for t in 1..=tasks {
        pool.push(bundle(cfg, t, vec![2 * t - 2, 2 * t - 1], 4, t as u64))
            .expect("task ids are consecutive");
    }
    pool
}

pub fn prepared(bb: &Backbone, n: usize) -> Vec<PreparedSample> {
    (0..n)
        .map(|i| {
            let img = image(&bb.config, 100 + i as u64);
            PreparedSample {
                image_tokens: bb.image_tokens(&img).expect("geometry matches"),
                query: bb.query_features(&img).expect("geometry matches"),
                class_index: i % 2,
            }
        })
        .collect()
}
