//! Synthetic activation streams standing in for calibration and evaluation text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Shape of a synthetic stream: `n_sequences` batches of `seq_len` vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Standard deviation of every feature.
    pub scale: f32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_sequences: 64,
            seq_len: 256,
            scale: 1.0,
        }
    }
}

impl StreamConfig {
    pub fn elements(&self, d_model: usize) -> usize {
        self.n_sequences * self.seq_len * d_model
    }
}

/// I.i.d. Gaussian sequences of width `d_model`.
pub fn gaussian_stream(config: &StreamConfig, d_model: usize, seed: u64) -> Result<Vec<DenseMatrix>> {
    if config.n_sequences == 0 || config.seq_len == 0 {
        return Err(Error::EmptyStream("stream needs at least one sequence of length >= 1".into()));
    }
    if !(config.scale > 0.0 && config.scale.is_finite()) {
        return Err(Error::Config(format!("stream scale must be positive, got {}", config.scale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..config.n_sequences)
        .map(|_| DenseMatrix::random_normal(config.seq_len, d_model, config.scale, &mut rng))
        .collect())
}

/// Beam-search proxy: `k` rows sharing one base vector,
/// `row = sqrt(rho) * base + sqrt(1 - rho) * noise`. Every entry stays unit-variance.
pub fn correlated_batch<R: Rng + ?Sized>(k: usize, d_model: usize, rho: f64, rng: &mut R) -> Result<DenseMatrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("correlation {rho} outside [0, 1]")));
    }
    let base: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(rng)).collect();
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let data = (0..k)
        .flat_map(|_| base.clone())
        .map(|v| {
            let n: f64 = StandardNormal.sample(rng);
            (a * v + b * n) as f32
        })
        .collect();
    DenseMatrix::new(k, d_model, data)
}
