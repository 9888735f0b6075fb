use ndarray::{Array2, ArrayView2};

use crate::error::{AespError, Result};

/// Bottleneck adapter `W_up · ReLU(W_down · x)` for one backbone layer.
///
/// Rows are tokens, so the map is applied as `ReLU(x·down)·up` with
/// `down: d × d'` and `up: d' × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub layer_index: usize,
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl AdapterParams {
    pub fn embed_dim(&self) -> usize {
        self.down.nrows()
    }

    pub fn bottleneck(&self) -> usize {
        self.down.ncols()
    }

    /// Applies the adapter to every row of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.embed_dim()
            || self.up.nrows() != self.bottleneck()
            || self.up.ncols() != self.embed_dim()
        {
            return Err(AespError::Config(format!(
                "adapter at layer {}: input width {} vs down {:?} / up {:?}",
                self.layer_index,
                x.ncols(),
                self.down.dim(),
                self.up.dim()
            )));
        }
        let hidden = x.dot(&self.down).mapv(|v| v.max(0.0));
        Ok(hidden.dot(&self.up))
    }
}

/// Adapter applied to `[image tokens, semantic prompt]`, which must be exactly
/// `image_tokens + 1` rows.
pub fn adapter_forward(
    x_in: ArrayView2<f64>,
    params: &AdapterParams,
    image_tokens: usize,
) -> Result<Array2<f64>> {
    if x_in.nrows() != image_tokens + 1 {
        return Err(AespError::Config(format!(
            "adapter input has {} rows, expected {} image tokens + 1 semantic prompt",
            x_in.nrows(),
            image_tokens
        )));
    }
    params.forward(x_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_down_gives_zero_output() {
        let p = AdapterParams {
            layer_index: 0,
            down: Array2::zeros((4, 2)),
            up: Array2::ones((2, 4)),
        };
        let x = Array2::from_elem((3, 4), 1.5);
        assert!(adapter_forward(x.view(), &p, 2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adapter_passes_nonnegative_input() {
        let p = AdapterParams {
            layer_index: 0,
            down: Array2::eye(3),
            up: Array2::eye(3),
        };
        let x = array![[0.0, 1.0, 2.0], [3.5, 0.25, 7.0]];
        assert_eq!(adapter_forward(x.view(), &p, 1).unwrap(), x);
    }

    #[test]
    fn matches_dense_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |a, b| Array2::from_shape_fn((a, b), |_| rng.random_range(-1.0..1.0));
        let x = r(3, 4);
        let p = AdapterParams {
            layer_index: 1,
            down: r(4, 2),
            up: r(2, 4),
        };
        let out = adapter_forward(x.view(), &p, 2).unwrap();
        for i in 0..3 {
            let mut hidden = [0.0; 2];
            for (k, h) in hidden.iter_mut().enumerate() {
                for j in 0..4 {
                    *h += x[[i, j]] * p.down[[j, k]];
                }
                *h = h.max(0.0);
            }
            for j in 0..4 {
                let expect: f64 = (0..2).map(|k| hidden[k] * p.up[[k, j]]).sum();
                assert!((out[[i, j]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let p = AdapterParams {
            layer_index: 0,
            down: Array2::zeros((4, 2)),
            up: Array2::zeros((2, 4)),
        };
        let x = Array2::zeros((3, 4));
        assert!(matches!(adapter_forward(x.view(), &p, 5), Err(AespError::Config(_))));
        let narrow = Array2::zeros((3, 3));
        assert!(adapter_forward(narrow.view(), &p, 2).is_err());
    }
}
