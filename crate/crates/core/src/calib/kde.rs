//! Gaussian kernel density estimation on a fixed grid, used to locate the
//! mode of an activation distribution.

use serde::{Deserialize, Serialize};

/// Bandwidth selection rule. Rules scale the sample standard deviation
/// (`ddof = 1`) the same way `scipy.stats.gaussian_kde` does in one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `sigma * n^(-1/5)`
    Scott,
    /// `sigma * (3n/4)^(-1/5)`
    Silverman,
    /// Absolute bandwidth.
    Fixed(f64),
}

impl BandwidthRule {
    pub fn bandwidth(&self, sigma: f64, n: usize) -> f64 {
        let n = n as f64;
        match *self {
            BandwidthRule::Scott => sigma * n.powf(-0.2),
            BandwidthRule::Silverman => sigma * (n * 0.75).powf(-0.2),
            BandwidthRule::Fixed(h) => h,
        }
    }
}

/// Above this many `samples x grid` kernel evaluations the density is
/// computed on linearly binned counts instead of the raw samples.
const EXACT_BUDGET: usize = 1 << 25;

/// Kernel support is cut at this many bandwidths.
const KERNEL_CUTOFF: f64 = 8.0;

pub(crate) fn sample_std(values: &[f32]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let ss: f64 = values
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Evenly spaced grid `[lo, hi]` with `points` entries.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Unnormalized density at every grid point. `sorted` must be ascending.
pub fn density_on_grid(sorted: &[f32], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    if sorted.len().saturating_mul(grid.len()) <= EXACT_BUDGET {
        exact_density(sorted, grid, bandwidth)
    } else {
        binned_density(sorted, grid, bandwidth)
    }
}

fn exact_density(sorted: &[f32], grid: &[f64], h: f64) -> Vec<f64> {
    let reach = KERNEL_CUTOFF * h;
    grid.iter()
        .map(|&g| {
            let start = sorted.partition_point(|&v| f64::from(v) < g - reach);
            let end = sorted.partition_point(|&v| f64::from(v) <= g + reach);
            sorted[start..end]
                .iter()
                .map(|&v| {
                    let z = (g - f64::from(v)) / h;
                    (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect()
}

fn binned_density(sorted: &[f32], grid: &[f64], h: f64) -> Vec<f64> {
    let m = grid.len();
    let lo = grid[0];
    let step = grid[1] - grid[0];
    let mut counts = vec![0.0f64; m];
    for &v in sorted {
        let pos = ((f64::from(v) - lo) / step).clamp(0.0, (m - 1) as f64);
        let i = (pos.floor() as usize).min(m - 2);
        let frac = pos - i as f64;
        counts[i] += 1.0 - frac;
        counts[i + 1] += frac;
    }
    let reach = ((KERNEL_CUTOFF * h / step).ceil() as usize).min(m - 1);
    let weights: Vec<f64> = (0..=reach)
        .map(|k| {
            let z = k as f64 * step / h;
            (-0.5 * z * z).exp()
        })
        .collect();
    (0..m)
        .map(|i| {
            let a = i.saturating_sub(reach);
            let b = (i + reach).min(m - 1);
            (a..=b).map(|j| counts[j] * weights[i.abs_diff(j)]).sum()
        })
        .collect()
}

/// Grid location of the density maximum; the lowest index wins ties.
/// Returns `None` when the data has no spread to smooth over.
pub fn kde_mode(sorted: &[f32], grid_points: usize, rule: BandwidthRule) -> Option<f64> {
    let lo = f64::from(*sorted.first()?);
    let hi = f64::from(*sorted.last()?);
    let h = rule.bandwidth(sample_std(sorted), sorted.len());
    if hi <= lo || h <= 0.0 || !h.is_finite() {
        return None;
    }
    let g = grid(lo, hi, grid_points);
    let dens = density_on_grid(sorted, &g, h);
    let best = dens
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0;
    Some(g[best])
}
