use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sparsity::evaluate;
use crate::calib::{calibrate_sequential, CalibrationConfig, CenteringPolicy, LayerStats, ModeEstimator, SiteTargets};
use crate::error::{Error, Result};
use crate::model::{FfnKind, Model};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationOptions {
    pub estimator: ModeEstimator,
    /// Relative output error at which achievable sparsity is read off.
    pub error_budget: f64,
    pub calibration: CalibrationConfig,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            estimator: ModeEstimator::kde(),
            error_budget: 0.05,
            calibration: CalibrationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub target: f64,
    pub observed_with: f64,
    pub observed_without: f64,
    pub err_with: f64,
    pub err_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub error_budget: f64,
    pub achievable_with: f64,
    pub achievable_without: f64,
    /// `achievable_with - achievable_without`, as a fraction.
    pub gain: f64,
}

impl AblationResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["target", "observed_with", "observed_without", "err_with", "err_without"])?;
        for r in &self.rows {
            out.write_record([
                format!("{}", r.target),
                format!("{:.6}", r.observed_with),
                format!("{:.6}", r.observed_without),
                format!("{:.6e}", r.err_with),
                format!("{:.6e}", r.err_without),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Largest sparsity whose error stays within `budget`, interpolating
/// linearly between curve points (ordered by increasing sparsity) and
/// starting from the dense point `(0, 0)`.
pub fn achievable_sparsity(curve: &[(f64, f64)], budget: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &(s, e) in curve {
        if e > budget {
            if e <= prev.1 {
                return prev.0;
            }
            return prev.0 + (budget - prev.1) / (e - prev.1) * (s - prev.0);
        }
        prev = (s, e);
    }
    prev.0
}

/// Sweeps the Down-input target sparsity of a GELU MLP stack with and
/// without a mode shift. Up inputs stay dense.
pub fn mode_centering_ablation(
    model: &Model,
    calib_stream: &[DenseMatrix],
    eval_stream: &[DenseMatrix],
    sparsity_grid: &[f64],
    options: &AblationOptions,
) -> Result<AblationResult> {
    if model.config().ffn_kind != FfnKind::GeluMlp {
        return Err(Error::Config("mode-centering ablation needs GELU MLP blocks".into()));
    }
    if sparsity_grid.is_empty() || sparsity_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sparsity grid must be non-empty and strictly ascending".into()));
    }
    let run = |s: f64, centering: CenteringPolicy| -> Result<(f64, f64)> {
        let specs = calibrate_sequential(
            model,
            calib_stream,
            SiteTargets::new(0.0, s),
            options.estimator,
            centering,
            &options.calibration,
        )?;
        let (report, err) = evaluate(model, &specs, eval_stream, true)?;
        Ok((report.down.observed, err))
    };
    let rows = sparsity_grid
        .par_iter()
        .map(|&s| {
            let (observed_with, err_with) = run(s, CenteringPolicy::All)?;
            let (observed_without, err_without) = run(s, CenteringPolicy::None)?;
            Ok(AblationRow {
                target: s,
                observed_with,
                observed_without,
                err_with,
                err_without,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let with: Vec<_> = rows.iter().map(|r| (r.observed_with, r.err_with)).collect();
    let without: Vec<_> = rows.iter().map(|r| (r.observed_without, r.err_without)).collect();
    let achievable_with = achievable_sparsity(&with, options.error_budget);
    let achievable_without = achievable_sparsity(&without, options.error_budget);
    Ok(AblationResult {
        rows,
        error_budget: options.error_budget,
        achievable_with,
        achievable_without,
        gain: achievable_with - achievable_without,
    })
}

/// Samples from `0.9 N(-0.17, 0.05) + 0.1 N(1.0, 0.3)`: a GELU-output-like
/// distribution whose peak sits at the GELU minimum rather than at zero.
pub fn shifted_gelu_mixture<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    let (main, tail) = match (Normal::new(-0.17, 0.05), Normal::new(1.0, 0.3)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => unreachable!("constant parameters are valid"),
    };
    (0..n)
        .map(|_| {
            let v: f64 = if rng.random::<f64>() < 0.9 {
                main.sample(rng)
            } else {
                tail.sample(rng)
            };
            v as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedThresholdGain {
    pub tau: f32,
    pub eta: f32,
    pub sparsity_without: f64,
    pub sparsity_with: f64,
    pub gain: f64,
}

/// Sparsity of `samples` at a fixed threshold with and without shifting by
/// the estimated mode.
pub fn fixed_threshold_gain(samples: &[f32], tau: f32, estimator: ModeEstimator) -> Result<FixedThresholdGain> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("tau must be finite and >= 0, got {tau}")));
    }
    let mut stats = LayerStats::new("fixed", samples.len().max(1), 0);
    stats.observe_values(samples);
    let eta = stats.estimate_mode(estimator)?;
    let frac = |shift: f32| samples.iter().filter(|&&v| (v - shift).abs() <= tau).count() as f64 / samples.len() as f64;
    let (without, with) = (frac(0.0), frac(eta));
    Ok(FixedThresholdGain {
        tau,
        eta,
        sparsity_without: without,
        sparsity_with: with,
        gain: with - without,
    })
}
