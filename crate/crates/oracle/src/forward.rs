use crate::{Matrix, OracleError};

pub const MAX_DIM: usize = 64;
pub const MAX_LAYERS: usize = 4;

/// One pre-norm block. Weight matrices map rows: `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefLayer {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefWeights {
    pub layers: Vec<RefLayer>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
    pub num_heads: usize,
    pub eps: f64,
}

/// Bottleneck adapter on `layer`: `ReLU(x·down)·up`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefAdapter {
    pub layer: usize,
    pub down: Matrix,
    pub up: Matrix,
}

/// Token layout `[cls, image × image_tokens, semantic, visual × visual_tokens]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefLayout {
    pub image_tokens: usize,
    pub visual_tokens: usize,
    /// Image rows may not attend to the semantic or visual positions.
    pub isolate_image: bool,
}

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + eps).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = (x[i] - mean) / denom * gamma[i] + beta[i];
    }
    out
}

fn affine_row(x: &[f64], w: &Matrix, b: Option<&[f64]>) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += x[i] * w[i][j];
        }
        if let Some(b) = b {
            acc += b[j];
        }
        out[j] = acc;
    }
    out
}

fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn check_matrix(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<(), OracleError> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(OracleError::Shape(format!("{name} is not {rows}x{cols}")));
    }
    Ok(())
}

/// Straight-line forward pass over the prompted sequence `seq` (one `Vec`
/// per token). Returns every output token after the final LayerNorm.
pub fn reference_forward(
    seq: &Matrix,
    weights: &RefWeights,
    adapters: &[RefAdapter],
    layout: RefLayout,
) -> Result<Matrix, OracleError> {
    let len = seq.len();
    let d = seq.first().map(|r| r.len()).unwrap_or(0);
    if d > MAX_DIM || weights.layers.len() > MAX_LAYERS {
        return Err(OracleError::Refused(format!(
            "d = {d}, layers = {} exceed the toy caps d <= {MAX_DIM}, layers <= {MAX_LAYERS}",
            weights.layers.len()
        )));
    }
    if len != 2 + layout.image_tokens + layout.visual_tokens {
        return Err(OracleError::Shape(format!("sequence has {len} rows, layout says otherwise")));
    }
    if weights.num_heads == 0 || !d.is_multiple_of(weights.num_heads) {
        return Err(OracleError::Shape(format!("{d} not divisible into {} heads", weights.num_heads)));
    }
    for a in adapters {
        if a.layer >= weights.layers.len() {
            return Err(OracleError::Shape(format!("adapter on missing layer {}", a.layer)));
        }
        let bottleneck = a.down.first().map(|r| r.len()).unwrap_or(0);
        check_matrix("adapter down", &a.down, d, bottleneck)?;
        check_matrix("adapter up", &a.up, bottleneck, d)?;
    }
    let heads = weights.num_heads;
    let dh = d / heads;
    let first_prompt = 1 + layout.image_tokens;
    let adapter_rows = 1..first_prompt + 1;
    let is_image = |i: usize| i >= 1 && i < first_prompt;
    let allowed = |i: usize, j: usize| !(layout.isolate_image && is_image(i) && j >= first_prompt);

    let mut x = seq.clone();
    for (li, w) in weights.layers.iter().enumerate() {
        check_matrix("wq", &w.wq, d, d)?;
        let a: Matrix = x.iter().map(|r| layer_norm_row(r, &w.ln1_gamma, &w.ln1_beta, weights.eps)).collect();
        let q: Matrix = a.iter().map(|r| affine_row(r, &w.wq, Some(&w.bq))).collect();
        let k: Matrix = a.iter().map(|r| affine_row(r, &w.wk, Some(&w.bk))).collect();
        let v: Matrix = a.iter().map(|r| affine_row(r, &w.wv, Some(&w.bv))).collect();
        let mut attn = vec![vec![0.0; d]; len];
        for h in 0..heads {
            let lo = h * dh;
            for i in 0..len {
                let mut scores = Vec::new();
                let mut keys = Vec::new();
                for j in 0..len {
                    if !allowed(i, j) {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in lo..lo + dh {
                        s += q[i][c] * k[j][c];
                    }
                    scores.push(s / (dh as f64).sqrt());
                    keys.push(j);
                }
                let probs = crate::losses::softmax(&scores);
                for (p, &j) in probs.iter().zip(&keys) {
                    for c in lo..lo + dh {
                        attn[i][c] += p * v[j][c];
                    }
                }
            }
        }
        let mut z = x.clone();
        for i in 0..len {
            let o = affine_row(&attn[i], &w.wo, Some(&w.bo));
            for c in 0..d {
                z[i][c] += o[c];
            }
        }
        let adapter = adapters.iter().find(|a| a.layer == li);
        let mut y = z.clone();
        for i in 0..len {
            let b = layer_norm_row(&z[i], &w.ln2_gamma, &w.ln2_beta, weights.eps);
            let hidden: Vec<f64> = affine_row(&b, &w.w1, Some(&w.b1)).into_iter().map(gelu).collect();
            let mlp = affine_row(&hidden, &w.w2, Some(&w.b2));
            for c in 0..d {
                y[i][c] += mlp[c];
            }
            if let (Some(ad), true) = (adapter, adapter_rows.contains(&i)) {
                let mid: Vec<f64> = affine_row(&b, &ad.down, None).into_iter().map(|t| t.max(0.0)).collect();
                let branch = affine_row(&mid, &ad.up, None);
                for c in 0..d {
                    y[i][c] += branch[c];
                }
            }
        }
        x = y;
    }
    Ok(x.iter()
        .map(|r| layer_norm_row(r, &weights.final_gamma, &weights.final_beta, weights.eps))
        .collect())
}
