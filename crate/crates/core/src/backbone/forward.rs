//! Forward pass and reverse-mode gradient of the adapted backbone.
//!
//! Each block is pre-norm:
//! `z = x + MHSA(LN1(x))`, `y = z + MLP(LN2(z)) + A(LN2(z))`, where the adapter
//! branch `A` only touches the image-token and semantic-prompt rows. Gradients
//! are taken with respect to the input tokens and the adapters; backbone
//! weights never receive gradients.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{AdapterParams, Backbone, PromptAttention};
use crate::data::Image;
use crate::error::{AespError, Result};
use crate::model::{assemble_input, SequenceLayout, TaskBundle, TokenSequence};

/// Outputs of one forward pass. Rows of `all_tokens` keep the input positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub cls_feature: Array1<f64>,
    pub semantic_output_token: Array1<f64>,
    pub all_tokens: Array2<f64>,
}

/// Gradient with respect to the input token matrix and to each adapter, in the
/// order the adapters were supplied.
#[derive(Debug, Clone)]
pub struct SequenceGrad {
    pub tokens: Array2<f64>,
    pub adapters: Vec<AdapterParams>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct AdapterTape {
    slot: usize,
    input: Array2<f64>,
    pre: Array2<f64>,
    down: Array2<f64>,
    up: Array2<f64>,
}

struct LayerTape {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ln2: LnCache,
    h1: Array2<f64>,
    adapter: Option<AdapterTape>,
}

/// Intermediate values kept for [`Backbone::backward`].
pub struct Tape {
    layers: Vec<LayerTape>,
    final_ln: LnCache,
    layout: Option<SequenceLayout>,
    adapter_shapes: Vec<AdapterShape>,
}

/// Layer index with the down and up matrix shapes.
type AdapterShape = (usize, (usize, usize), (usize, usize));

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, eps: f64) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + eps).sqrt();
        row *= *inv;
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, gamma: &Array1<f64>, cache: &LnCache) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv * (gi - mean_g - xi * mean_gx));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Backbone {
    /// Flattens the image into patches, ordered row-major over the patch grid.
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        let c = &self.config;
        if image.channels != c.channels || image.height != c.image_size || image.width != c.image_size {
            return Err(AespError::Config(format!(
                "image is {}x{}x{}, backbone expects {}x{}x{}",
                image.channels, image.height, image.width, c.channels, c.image_size, c.image_size
            )));
        }
        let p = c.patch_size;
        let grid = c.image_size / p;
        let mut out = Array2::zeros((grid * grid, c.patch_dim()));
        for gi in 0..grid {
            for gj in 0..grid {
                let mut row = out.row_mut(gi * grid + gj);
                let mut k = 0;
                for ch in 0..c.channels {
                    for i in 0..p {
                        for j in 0..p {
                            row[k] = image.pixel(ch, gi * p + i, gj * p + j);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Image tokens `ξ_e` with positional embeddings added.
    pub fn image_tokens(&self, image: &Image) -> Result<Array2<f64>> {
        let w = &self.weights;
        let patches = self.patchify(image)?;
        let tokens = patches.dot(&w.patch_weight) + &w.patch_bias;
        Ok(tokens + w.pos_embed.slice(s![1.., ..]))
    }

    /// Class token with its positional embedding.
    pub fn class_token(&self) -> Array1<f64> {
        &self.weights.cls_token + &self.weights.pos_embed.row(0)
    }

    /// Embeds an image and assembles the prompted input for `bundle`.
    pub fn embed(&self, image: &Image, bundle: &TaskBundle) -> Result<TokenSequence> {
        let tokens = self.image_tokens(image)?;
        assemble_input(self.class_token().view(), tokens.view(), bundle)
    }

    /// Frozen, prompt-free, adapter-free class feature `q` used for task matching.
    pub fn query_features(&self, image: &Image) -> Result<Array1<f64>> {
        let tokens = self.image_tokens(image)?;
        let mut x0 = Array2::zeros((tokens.nrows() + 1, self.config.embed_dim));
        x0.row_mut(0).assign(&self.class_token());
        x0.slice_mut(s![1.., ..]).assign(&tokens);
        let (out, _) = self.run(x0, None, &[], false)?;
        Ok(out.row(0).to_owned())
    }

    /// Forward pass using the bundle's adapters at every configured layer.
    pub fn forward(&self, seq: &TokenSequence, bundle: &TaskBundle) -> Result<ForwardOutput> {
        self.forward_with_adapters(seq, &bundle.params.adapters)
    }

    /// Forward pass with no adapters at all.
    pub fn forward_plain(&self, seq: &TokenSequence) -> Result<ForwardOutput> {
        let (out, _) = self.run(seq.to_matrix(), Some(seq.layout()), &[], false)?;
        Ok(Self::output(out, seq.layout()))
    }

    pub fn forward_with_adapters(
        &self,
        seq: &TokenSequence,
        adapters: &[AdapterParams],
    ) -> Result<ForwardOutput> {
        let slots = self.adapter_slots(adapters)?;
        let (out, _) = self.run(seq.to_matrix(), Some(seq.layout()), &slots, false)?;
        Ok(Self::output(out, seq.layout()))
    }

    /// Forward pass that also records what [`Backbone::backward`] needs.
    pub fn forward_with_tape(
        &self,
        seq: &TokenSequence,
        adapters: &[AdapterParams],
    ) -> Result<(ForwardOutput, Tape)> {
        let slots = self.adapter_slots(adapters)?;
        let (out, tape) = self.run(seq.to_matrix(), Some(seq.layout()), &slots, true)?;
        let mut tape = tape.expect("tape requested");
        tape.adapter_shapes = adapters
            .iter()
            .map(|a| (a.layer_index, a.down.dim(), a.up.dim()))
            .collect();
        Ok((Self::output(out, seq.layout()), tape))
    }

    fn output(all_tokens: Array2<f64>, layout: SequenceLayout) -> ForwardOutput {
        ForwardOutput {
            cls_feature: all_tokens.row(0).to_owned(),
            semantic_output_token: all_tokens.row(layout.semantic_index()).to_owned(),
            all_tokens,
        }
    }

    /// Maps each layer to the adapter it uses. Every configured layer must be
    /// covered and no adapter may sit on an unconfigured layer.
    fn adapter_slots<'a>(&self, adapters: &'a [AdapterParams]) -> Result<Vec<Option<(usize, &'a AdapterParams)>>> {
        let configured = self.config.resolved_adapter_layers();
        let mut slots = vec![None; self.config.num_layers];
        for (i, a) in adapters.iter().enumerate() {
            if !configured.contains(&a.layer_index) {
                return Err(AespError::Config(format!(
                    "adapter supplied for layer {} which is not an adapter layer",
                    a.layer_index
                )));
            }
            if a.embed_dim() != self.config.embed_dim || a.up.dim() != (a.bottleneck(), self.config.embed_dim) {
                return Err(AespError::Config(format!(
                    "adapter for layer {} has shapes {:?}/{:?}",
                    a.layer_index,
                    a.down.dim(),
                    a.up.dim()
                )));
            }
            slots[a.layer_index] = Some((i, a));
        }
        if let Some(l) = configured.iter().find(|&&l| slots[l].is_none()) {
            return Err(AespError::Config(format!("missing adapter for layer {l}")));
        }
        Ok(slots)
    }

    fn attention_mask(&self, layout: Option<SequenceLayout>, len: usize) -> Option<Array2<bool>> {
        let layout = layout?;
        match self.config.prompt_attention {
            PromptAttention::Full => None,
            PromptAttention::ImageIsolated => {
                let mut allowed = Array2::from_elem((len, len), true);
                for i in layout.image_range() {
                    allowed[[i, layout.semantic_index()]] = false;
                    for j in layout.visual_range() {
                        allowed[[i, j]] = false;
                    }
                }
                Some(allowed)
            }
        }
    }

    fn run(
        &self,
        mut x: Array2<f64>,
        layout: Option<SequenceLayout>,
        slots: &[Option<(usize, &AdapterParams)>],
        record: bool,
    ) -> Result<(Array2<f64>, Option<Tape>)> {
        let cfg = &self.config;
        if x.ncols() != cfg.embed_dim {
            return Err(AespError::Config(format!(
                "token width {} but backbone width {}",
                x.ncols(),
                cfg.embed_dim
            )));
        }
        let eps = cfg.layer_norm_eps;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let len = x.nrows();
        let mask = self.attention_mask(layout, len);
        let mut tapes = Vec::new();

        for (li, w) in self.weights.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &w.ln1_gamma, &w.ln1_beta, eps);
            let q = a.dot(&w.wq) + &w.bq;
            let k = a.dot(&w.wk) + &w.bk;
            let v = a.dot(&w.wv) + &w.bv;
            let mut o = Array2::zeros((len, cfg.embed_dim));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                if let Some(m) = &mask {
                    Zip::from(&mut scores).and(m).for_each(|s, &ok| {
                        if !ok {
                            *s = f64::NEG_INFINITY;
                        }
                    });
                }
                softmax_rows_inplace(&mut scores);
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let z = &x + &(o.dot(&w.wo) + &w.bo);
            let (b, ln2) = layer_norm(&z, &w.ln2_gamma, &w.ln2_beta, eps);
            let h1 = b.dot(&w.w1) + &w.b1;
            let g = h1.mapv(gelu);
            let mut y = &z + &(g.dot(&w.w2) + &w.b2);

            let mut adapter_tape = None;
            if let (Some((slot, ad)), Some(layout)) = (slots.get(li).copied().flatten(), layout) {
                let rows = layout.adapter_range();
                let input = b.slice(s![rows.clone(), ..]).to_owned();
                let pre = input.dot(&ad.down);
                let branch = pre.mapv(|v| v.max(0.0)).dot(&ad.up);
                let mut target = y.slice_mut(s![rows, ..]);
                target += &branch;
                if record {
                    adapter_tape = Some(AdapterTape {
                        slot,
                        input,
                        pre,
                        down: ad.down.clone(),
                        up: ad.up.clone(),
                    });
                }
            }
            if record {
                tapes.push(LayerTape {
                    ln1,
                    q,
                    k,
                    v,
                    probs,
                    ln2,
                    h1,
                    adapter: adapter_tape,
                });
            }
            x = y;
        }
        let (out, final_ln) = layer_norm(&x, &self.weights.final_gamma, &self.weights.final_beta, eps);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(AespError::Numerical("non-finite backbone output".into()));
        }
        let tape = record.then(|| Tape {
            layers: tapes,
            final_ln,
            layout,
            adapter_shapes: Vec::new(),
        });
        Ok((out, tape))
    }

    /// Back-propagates `d_out` (gradient w.r.t. `all_tokens`) to the input
    /// tokens and to the adapters recorded in `tape`.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> SequenceGrad {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut adapter_grads: Vec<AdapterParams> = tape
            .adapter_shapes
            .iter()
            .map(|&(layer_index, down, up)| AdapterParams {
                layer_index,
                down: Array2::zeros(down),
                up: Array2::zeros(up),
            })
            .collect();

        let mut dx = layer_norm_backward(&d_out.to_owned(), &self.weights.final_gamma, &tape.final_ln);
        for (w, t) in self.weights.layers.iter().zip(&tape.layers).rev() {
            // y = z + mlp(b) + adapter(b[rows]), b = LN2(z)
            let dy = dx;
            let dg = dy.dot(&w.w2.t());
            let dh1 = &dg * &t.h1.mapv(gelu_grad);
            let mut db = dh1.dot(&w.w1.t());
            if let (Some(at), Some(layout)) = (&t.adapter, tape.layout) {
                let rows = layout.adapter_range();
                let d_branch = dy.slice(s![rows.clone(), ..]);
                let ad_grad = &mut adapter_grads[at.slot];
                let hidden = at.pre.mapv(|v| v.max(0.0));
                ad_grad.up += &hidden.t().dot(&d_branch);
                let mut dpre = d_branch.dot(&at.up.t());
                Zip::from(&mut dpre).and(&at.pre).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                ad_grad.down += &at.input.t().dot(&dpre);
                let mut target = db.slice_mut(s![rows, ..]);
                target += &dpre.dot(&at.down.t());
            }
            let mut dz = dy;
            dz += &layer_norm_backward(&db, &w.ln2_gamma, &t.ln2);

            // z = x + o·Wo + bo
            let do_ = dz.dot(&w.wo.t());
            let mut dq = Array2::zeros(t.q.raw_dim());
            let mut dk = Array2::zeros(t.k.raw_dim());
            let mut dv = Array2::zeros(t.v.raw_dim());
            for (h, p) in t.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let do_h = do_.slice(cols);
                let dp = do_h.dot(&t.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&do_h));
                let mut ds = Array2::zeros(p.raw_dim());
                for ((mut ds_row, p_row), dp_row) in ds
                    .axis_iter_mut(Axis(0))
                    .zip(p.axis_iter(Axis(0)))
                    .zip(dp.axis_iter(Axis(0)))
                {
                    let inner = p_row.dot(&dp_row);
                    Zip::from(&mut ds_row)
                        .and(&p_row)
                        .and(&dp_row)
                        .for_each(|d, &pi, &dpi| *d = pi * (dpi - inner) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&t.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&t.q.slice(cols)));
            }
            let da = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
            dz += &layer_norm_backward(&da, &w.ln1_gamma, &t.ln1);
            dx = dz;
        }
        SequenceGrad {
            tokens: dx,
            adapters: adapter_grads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Backbone {
        Backbone::toy(BackboneConfig::toy(), 7).unwrap()
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(1, 8, 8);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        img
    }

    #[test]
    fn zero_up_projection_matches_adapter_free_forward() {
        let bb = toy();
        let mut b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        b.params.adapters.iter_mut().for_each(|a| a.up.fill(0.0));
        let seq = bb.embed(&image(1), &b).unwrap();
        assert_eq!(bb.forward(&seq, &b).unwrap(), bb.forward_plain(&seq).unwrap());
    }

    #[test]
    fn no_adapter_layers_equals_plain_forward() {
        let mut cfg = BackboneConfig::toy();
        cfg.adapter_layers = Some(Default::default());
        let bb = Backbone::toy(cfg, 7).unwrap();
        let b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        assert!(b.params.adapters.is_empty());
        let seq = bb.embed(&image(2), &b).unwrap();
        assert_eq!(bb.forward(&seq, &b).unwrap(), bb.forward_plain(&seq).unwrap());
    }

    #[test]
    fn adapters_change_only_through_adapted_rows_in_first_layer() {
        let bb = toy();
        let b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        let seq = bb.embed(&image(3), &b).unwrap();
        let with = bb.forward(&seq, &b).unwrap();
        let without = bb.forward_plain(&seq).unwrap();
        assert_ne!(with.cls_feature, without.cls_feature);
        assert_eq!(with.all_tokens.dim(), (seq.len(), 32));
    }

    #[test]
    fn missing_adapter_is_a_config_error() {
        let bb = toy();
        let mut b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        b.params.adapters.pop();
        let seq = bb.embed(&image(1), &b).unwrap();
        assert!(matches!(bb.forward(&seq, &b), Err(AespError::Config(_))));
    }

    #[test]
    fn query_features_are_deterministic_and_prompt_free() {
        let bb = toy();
        let img = image(4);
        let q1 = bb.query_features(&img).unwrap();
        assert_eq!(q1, bb.query_features(&img).unwrap());
        assert_eq!(q1.len(), 32);
    }

    #[test]
    fn permuting_image_tokens_permutes_embedding_rows() {
        let bb = toy();
        let b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        let seq = bb.embed(&image(5), &b).unwrap();
        let mut swapped = seq.clone();
        let r1 = seq.image_tokens.row(1).to_owned();
        let r3 = seq.image_tokens.row(3).to_owned();
        swapped.image_tokens.row_mut(1).assign(&r3);
        swapped.image_tokens.row_mut(3).assign(&r1);
        let (a, c) = (seq.to_matrix(), swapped.to_matrix());
        for i in 0..a.nrows() {
            match i {
                2 => assert_eq!(c.row(i), a.row(4)),
                4 => assert_eq!(c.row(i), a.row(2)),
                _ => assert_eq!(c.row(i), a.row(i)),
            }
        }
    }

    #[test]
    fn image_isolated_attention_hides_prompts_from_image_tokens() {
        let mut cfg = BackboneConfig::toy();
        cfg.num_layers = 1;
        cfg.prompt_attention = PromptAttention::ImageIsolated;
        cfg.adapter_layers = Some(Default::default());
        let bb = Backbone::toy(cfg, 7).unwrap();
        let b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        let seq = bb.embed(&image(6), &b).unwrap();
        let base = bb.forward_plain(&seq).unwrap();
        let mut moved = seq.clone();
        moved.visual_prompt.mapv_inplace(|v| v + 1.0);
        moved.semantic_prompt.mapv_inplace(|v| v - 0.5);
        let out = bb.forward_plain(&moved).unwrap();
        let rows = seq.layout().image_range();
        assert_eq!(
            out.all_tokens.slice(s![rows.clone(), ..]),
            base.all_tokens.slice(s![rows, ..])
        );
        assert_ne!(out.cls_feature, base.cls_feature);
    }

    /// Central-difference check of `backward` on a random linear readout.
    #[test]
    fn backward_matches_finite_differences() {
        let bb = toy();
        let mut b = fixtures::adapted_bundle(&bb.config, 1, vec![0, 1], 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // A constant prompt sits on the LayerNorm singularity.
        b.params.semantic_prompt.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let seq = bb.embed(&image(7), &b).unwrap();
        let layout = seq.layout();
        let readout = Array2::from_shape_fn((layout.len(), 32), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &Array2<f64>, adapters: &[AdapterParams]| {
            let s = TokenSequence::from_matrix(m.view(), layout).unwrap();
            let out = bb.forward_with_adapters(&s, adapters).unwrap();
            (&out.all_tokens * &readout).sum()
        };
        let x = seq.to_matrix();
        let (_, tape) = bb.forward_with_tape(&seq, &b.params.adapters).unwrap();
        let g = bb.backward(&tape, readout.view());
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, j) in [(0, 0), (2, 5), (layout.semantic_index(), 7), (layout.len() - 1, 31)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let num = (loss(&xp, &b.params.adapters) - loss(&xm, &b.params.adapters)) / (2.0 * eps);
            worst = worst.max((num - g.tokens[[i, j]]).abs() / num.abs().max(1.0));
        }
        for (l, (r, c)) in [(0, (3, 2)), (1, (10, 4))] {
            for up in [false, true] {
                let perturb = |delta: f64| {
                    let mut a = b.params.adapters.clone();
                    if up {
                        a[l].up[[c, r]] += delta;
                    } else {
                        a[l].down[[r, c]] += delta;
                    }
                    loss(&x, &a)
                };
                let num = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                let ana = if up { g.adapters[l].up[[c, r]] } else { g.adapters[l].down[[r, c]] };
                worst = worst.max((num - ana).abs() / num.abs().max(1.0));
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
