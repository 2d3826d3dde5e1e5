//! Bounded uniform noise on token embeddings during edit-time training.
//!
//! Each element of an `[L×d]` embedding matrix receives an independent draw from
//! `U(-b, b)` with `b = alpha / (sqrt(L) * d)`. Noise never touches evaluation or
//! generation.

use serde::{Deserialize, Serialize};

use crate::rng::RandomState;
use crate::tensor::Tensor;
use crate::math;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub alpha: f64,
    pub rng_seed: u64,
    /// Draw fresh noise at every optimizer step; otherwise once per edit.
    #[serde(default = "default_true")]
    pub resample_each_step: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            rng_seed: 0,
            resample_each_step: true,
        }
    }
}

/// Half-width of the noise interval, `alpha / (sqrt(len) * dim)`.
pub fn noise_bound(len: usize, dim: usize, alpha: f64) -> f64 {
    alpha / (math::sqrt(len as f64) * dim as f64)
}

/// Noise matrix of the given shape. Returns `None` when `alpha == 0`, in which case no
/// random draws are consumed.
pub fn sample_noise(len: usize, dim: usize, alpha: f64, rng: &mut RandomState) -> Option<Tensor> {
    if alpha == 0.0 {
        return None;
    }
    let b = noise_bound(len, dim, alpha);
    let data = (0..len * dim).map(|_| rng.random_range(-b..=b)).collect();
    Some(Tensor::new(alloc::vec![len, dim], data).expect("len, dim positive"))
}

/// `E + eps` with fresh noise; a plain copy of `E` when `alpha == 0`.
pub fn perturb_embeddings(e: &Tensor, cfg: &NoiseConfig, rng: &mut RandomState) -> Tensor {
    let (len, dim) = (e.rows(), e.cols());
    let mut out = e.clone();
    if let Some(noise) = sample_noise(len, dim, cfg.alpha, rng) {
        out.add_assign(&noise).expect("same shape");
    }
    out
}
