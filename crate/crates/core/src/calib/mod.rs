//! Activation statistics and the calibrated quantities derived from them:
//! the pruning threshold `tau` (a quantile of `|X|`) and the mode shift `eta`.
//!
//! A [`LayerStats`] keeps a bounded uniform sample of everything it has
//! observed (reservoir sampling, one slot decision per element), so
//! calibration memory stays fixed no matter how long the stream is. Shards
//! built in parallel are combined with [`LayerStats::merge`].

mod collect;
pub mod kde;
pub mod quantile;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneSpec;
use crate::tensor::DenseMatrix;

pub use collect::{
    calibrate_sequential, collect_stats, derive_specs, group_key, CalibrationConfig,
    CenteringPolicy, Grouping, SiteTargets,
};
pub use kde::BandwidthRule;
use quantile::{check_probability, quantile_sorted, sorted_copy};

/// Default reservoir capacity per layer (2^20 elements).
pub const DEFAULT_RESERVOIR_CAPACITY: usize = 1 << 20;

/// Default number of KDE grid points.
pub const DEFAULT_KDE_GRID_POINTS: usize = 2048;

/// How the mode shift is estimated from the raw-value reservoir.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModeEstimator {
    #[default]
    Mean,
    Median,
    /// Argmax of a Gaussian KDE evaluated on `grid_points` evenly spaced
    /// points spanning the reservoir's range.
    Kde {
        grid_points: usize,
        bandwidth: BandwidthRule,
    },
}

impl ModeEstimator {
    /// KDE with Scott's rule on the default grid.
    pub fn kde() -> Self {
        ModeEstimator::Kde {
            grid_points: DEFAULT_KDE_GRID_POINTS,
            bandwidth: BandwidthRule::Scott,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModeEstimator::Kde { grid_points, .. } if grid_points < 2 => Err(Error::Domain(
                format!("KDE needs at least 2 grid points, got {grid_points}"),
            )),
            ModeEstimator::Kde {
                bandwidth: BandwidthRule::Fixed(h),
                ..
            } if !(h > 0.0 && h.is_finite()) => {
                Err(Error::Domain(format!("fixed KDE bandwidth must be positive, got {h}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-layer calibration accumulator.
#[derive(Debug, Clone)]
pub struct LayerStats {
    layer_id: String,
    abs_reservoir: Vec<f32>,
    raw_reservoir: Vec<f32>,
    seen_count: u64,
    reservoir_capacity: usize,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl LayerStats {
    pub fn new(layer_id: impl Into<String>, reservoir_capacity: usize, rng_seed: u64) -> Self {
        Self {
            layer_id: layer_id.into(),
            abs_reservoir: Vec::new(),
            raw_reservoir: Vec::new(),
            seen_count: 0,
            reservoir_capacity: reservoir_capacity.max(1),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn reservoir_capacity(&self) -> usize {
        self.reservoir_capacity
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn abs_reservoir(&self) -> &[f32] {
        &self.abs_reservoir
    }

    pub fn raw_reservoir(&self) -> &[f32] {
        &self.raw_reservoir
    }

    pub fn is_empty(&self) -> bool {
        self.raw_reservoir.is_empty()
    }

    /// Feeds every element of `activations` into the reservoirs.
    pub fn observe(&mut self, activations: &DenseMatrix) {
        self.observe_values(activations.as_slice());
    }

    /// Both reservoirs keep the same stream positions, so `abs_reservoir[i]`
    /// is always `|raw_reservoir[i]|`.
    pub fn observe_values(&mut self, values: &[f32]) {
        for &v in values {
            self.seen_count += 1;
            if self.raw_reservoir.len() < self.reservoir_capacity {
                self.raw_reservoir.push(v);
                self.abs_reservoir.push(v.abs());
            } else {
                let j = self.rng.random_range(0..self.seen_count);
                if let Ok(j) = usize::try_from(j) {
                    if j < self.reservoir_capacity {
                        self.raw_reservoir[j] = v;
                        self.abs_reservoir[j] = v.abs();
                    }
                }
            }
        }
    }

    fn require_samples(&self) -> Result<()> {
        if self.raw_reservoir.is_empty() {
            return Err(Error::Calibration(format!(
                "layer `{}` has an empty reservoir",
                self.layer_id
            )));
        }
        Ok(())
    }

    /// `tau = Quantile(|X|, s)` under linear interpolation.
    pub fn quantile_threshold(&self, target_sparsity: f64) -> Result<f32> {
        Ok(self.thresholds(&[target_sparsity])?[0])
    }

    /// Thresholds for several targets with a single sort.
    pub fn thresholds(&self, targets: &[f64]) -> Result<Vec<f32>> {
        self.require_samples()?;
        for &s in targets {
            check_probability(s)?;
        }
        let sorted = sorted_copy(self.abs_reservoir.iter().copied());
        Ok(targets
            .iter()
            .map(|&s| quantile_sorted(&sorted, s) as f32)
            .collect())
    }

    /// `Quantile(|X - eta|, s)`: the threshold to use after mode centering.
    pub fn quantile_threshold_centered(&self, target_sparsity: f64, eta: f32) -> Result<f32> {
        self.require_samples()?;
        check_probability(target_sparsity)?;
        let sorted = sorted_copy(self.raw_reservoir.iter().map(|&v| (v - eta).abs()));
        Ok(quantile_sorted(&sorted, target_sparsity) as f32)
    }

    pub fn estimate_mode(&self, estimator: ModeEstimator) -> Result<f32> {
        self.require_samples()?;
        estimator.validate()?;
        let raw = &self.raw_reservoir;
        let mode = match estimator {
            ModeEstimator::Mean => {
                raw.iter().map(|&v| f64::from(v)).sum::<f64>() / raw.len() as f64
            }
            ModeEstimator::Median => quantile_sorted(&sorted_copy(raw.iter().copied()), 0.5),
            ModeEstimator::Kde {
                grid_points,
                bandwidth,
            } => {
                let sorted = sorted_copy(raw.iter().copied());
                // zero spread: the data is a single point mass
                kde::kde_mode(&sorted, grid_points, bandwidth)
                    .unwrap_or_else(|| f64::from(sorted[0]))
            }
        };
        Ok(mode as f32)
    }

    /// Combines two shards of the same layer into one reservoir that is a
    /// uniform sample of the concatenated streams.
    ///
    /// Each output slot is drawn from `a` with probability proportional to the
    /// stream elements `a` still represents, then filled by an element of that
    /// shard's reservoir chosen without replacement.
    pub fn merge(a: &LayerStats, b: &LayerStats) -> Result<LayerStats> {
        if a.layer_id != b.layer_id {
            return Err(Error::Merge(format!(
                "layer ids differ: `{}` vs `{}`",
                a.layer_id, b.layer_id
            )));
        }
        if a.reservoir_capacity != b.reservoir_capacity {
            return Err(Error::Merge(format!(
                "capacities differ: {} vs {}",
                a.reservoir_capacity, b.reservoir_capacity
            )));
        }
        if a.seen_count == 0 {
            return Ok(b.clone());
        }
        if b.seen_count == 0 {
            return Ok(a.clone());
        }

        let mut out = a.clone();
        out.seen_count = a.seen_count + b.seen_count;
        let exhaustive = |s: &LayerStats| s.seen_count as usize == s.raw_reservoir.len();
        if exhaustive(a) && exhaustive(b) && out.seen_count as usize <= a.reservoir_capacity {
            out.raw_reservoir.extend_from_slice(&b.raw_reservoir);
            out.abs_reservoir.extend_from_slice(&b.abs_reservoir);
            return Ok(out);
        }

        let take = (a.reservoir_capacity as u64).min(out.seen_count) as usize;
        let mut pool_a: Vec<usize> = (0..a.raw_reservoir.len()).collect();
        let mut pool_b: Vec<usize> = (0..b.raw_reservoir.len()).collect();
        let (mut left_a, mut left_b) = (a.seen_count, b.seen_count);
        let mut raw = Vec::with_capacity(take);
        let rng = &mut out.rng;
        for _ in 0..take {
            let from_a = rng.random_range(0..left_a + left_b) < left_a;
            let (pool, src, left) = if from_a {
                (&mut pool_a, &a.raw_reservoir, &mut left_a)
            } else {
                (&mut pool_b, &b.raw_reservoir, &mut left_b)
            };
            *left -= 1;
            let pick = rng.random_range(0..pool.len());
            raw.push(src[pool.swap_remove(pick)]);
        }
        out.abs_reservoir = raw.iter().map(|v| v.abs()).collect();
        out.raw_reservoir = raw;
        Ok(out)
    }

    /// Summary row for the calibration report.
    pub fn summarize(&self, targets: &[f64], kde: ModeEstimator) -> Result<LayerCalibration> {
        let taus = self.thresholds(targets)?;
        let tau_by_sparsity = targets
            .iter()
            .zip(taus)
            .map(|(&s, t)| (sparsity_key(s), t))
            .collect();
        Ok(LayerCalibration {
            layer_id: self.layer_id.clone(),
            seen_count: self.seen_count,
            tau_by_sparsity,
            eta: EtaEstimates {
                mean: self.estimate_mode(ModeEstimator::Mean)?,
                median: self.estimate_mode(ModeEstimator::Median)?,
                kde: self.estimate_mode(kde)?,
            },
            seed: self.rng_seed,
        })
    }
}

/// Map key used for target sparsities in reports.
pub fn sparsity_key(s: f64) -> String {
    format!("{s:.4}")
}

/// Mode-shift estimates for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaEstimates {
    pub mean: f32,
    pub median: f32,
    pub kde: f32,
}

/// One layer of a calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCalibration {
    pub layer_id: String,
    pub seen_count: u64,
    pub tau_by_sparsity: BTreeMap<String, f32>,
    pub eta: EtaEstimates,
    pub seed: u64,
}

/// Calibration output: per-layer statistics plus any prune specs derived
/// from them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    pub layers: Vec<LayerCalibration>,
    #[serde(default)]
    pub prune_specs: Vec<PruneSpec>,
}
