//! Low-rank adapters: additive weight deltas that specialize the frozen
//! backbone for one perspective.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One low-rank delta for a single target weight matrix.
///
/// The effective delta is `scaling * (b . a)` in (out x in) orientation,
/// stored against weights laid out (in x out), so forward applies
/// `w + scaling * a^T . b^T`. Factor `b` starts at zero so a fresh adapter is
/// an exact no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// (rank x in), small random init.
    pub a: Array2<f64>,
    /// (out x rank), zero init.
    pub b: Array2<f64>,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn init(in_dim: usize, out_dim: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 0.02).unwrap();
        let a = Array2::from_shape_fn((rank, in_dim), |_| dist.sample(rng));
        let b = Array2::zeros((out_dim, rank));
        Self {
            a,
            b,
            scaling: alpha / rank as f64,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, rank: usize, alpha: f64) -> Self {
        Self {
            a: Array2::zeros((rank, in_dim)),
            b: Array2::zeros((out_dim, rank)),
            scaling: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// Effective delta in (in x out) orientation, matching `x . w` layouts.
    pub fn delta(&self) -> Array2<f64> {
        self.a.t().dot(&self.b.t()).mapv(|v| v * self.scaling)
    }

    /// Applies the delta onto a base weight: `base + scaling * a^T b^T`.
    pub fn apply_to(&self, base: &Array2<f64>) -> Result<Array2<f64>> {
        let (in_dim, out_dim) = base.dim();
        if self.a.ncols() != in_dim || self.b.nrows() != out_dim {
            return Err(Error::Shape(format!(
                "adapter ({}x{} / {}x{}) does not fit target {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols(),
                in_dim,
                out_dim
            )));
        }
        Ok(base + &self.delta())
    }
}

/// Adapters for one transformer layer: attention query/value and MLP up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
    pub up: LoraAdapter,
}

/// The full per-perspective adapter stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub layers: Vec<LayerLora>,
}

impl LoraSet {
    pub fn init(
        n_layers: usize,
        d_model: usize,
        d_mlp: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerLora {
                q: LoraAdapter::init(d_model, d_model, rank, alpha, rng),
                v: LoraAdapter::init(d_model, d_model, rank, alpha, rng),
                up: LoraAdapter::init(d_model, d_mlp, rank, alpha, rng),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(n_layers: usize, d_model: usize, d_mlp: usize, rank: usize, alpha: f64) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerLora {
                q: LoraAdapter::zeros(d_model, d_model, rank, alpha),
                v: LoraAdapter::zeros(d_model, d_model, rank, alpha),
                up: LoraAdapter::zeros(d_model, d_mlp, rank, alpha),
            })
            .collect();
        Self { layers }
    }
}
