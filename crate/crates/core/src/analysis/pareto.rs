use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sparsity::{evaluate, SparsityReport};
use crate::calib::{calibrate_sequential, CalibrationConfig, CenteringPolicy, ModeEstimator, SiteTargets};
use crate::error::{Error, Result};
use crate::model::{HookPoint, Model};
use crate::prune::PruneSpec;
use crate::tensor::DenseMatrix;

/// Calibration settings shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    pub estimator: ModeEstimator,
    pub centering: CenteringPolicy,
    pub calibration: CalibrationConfig,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            estimator: ModeEstimator::Mean,
            centering: CenteringPolicy::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub label: String,
    pub targets: SiteTargets,
    pub report: SparsityReport,
    /// Relative L2 error against the dense model.
    pub error: f64,
    /// Higher is better; `-error` for the default evaluator.
    pub quality: f64,
    pub dominant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepResult {
    pub grid_up_gate: Vec<f64>,
    pub grid_down: Vec<f64>,
    /// Row-major over (up_gate, down).
    pub entries: Vec<SweepEntry>,
    /// Indices of the Pareto-dominant entries.
    pub dominant: Vec<usize>,
}

impl SweepResult {
    pub fn entry(&self, i_up: usize, i_down: usize) -> &SweepEntry {
        &self.entries[i_up * self.grid_down.len() + i_down]
    }

    /// One row per grid point in the Up / Gate / Down / FFN table layout.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "label",
            "target_up_gate",
            "target_down",
            "up",
            "gate",
            "down",
            "ffn",
            "macs_ratio",
            "error",
            "quality",
            "dominant",
        ])?;
        for e in &self.entries {
            let [up, gate, down, ffn] = e.report.table_row();
            let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
            out.write_record([
                e.label.clone(),
                format!("{}", e.targets.up_gate),
                format!("{}", e.targets.down),
                cell(up),
                cell(gate),
                cell(down),
                cell(ffn),
                format!("{:.6}", e.report.macs_ratio),
                format!("{:.6e}", e.error),
                format!("{:.6e}", e.quality),
                e.dominant.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `a` dominates `b` when it is at least as good on both objectives
/// (maximized) and strictly better on one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Indices of points no other point dominates, ascending.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|&p| dominates(p, points[i])))
        .collect()
}

pub fn scap_label(t: SiteTargets) -> String {
    format!(
        "SCAP (s_up/gate: {:.0}%, s_down: {:.0}%)",
        100.0 * t.up_gate,
        100.0 * t.down
    )
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if let Some(s) = grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("{name} grid value {s} outside [0, 1]")));
    }
    Ok(())
}

/// Calibrates and evaluates every `(up_gate, down)` target pair in
/// parallel. `eval` returns the report and a quality score (higher is
/// better); the error column is the report's reconstruction error.
pub fn pareto_sweep_with<F>(
    model: &Model,
    calib_stream: &[DenseMatrix],
    grid_up_gate: &[f64],
    grid_down: &[f64],
    options: &SweepOptions,
    eval: F,
) -> Result<SweepResult>
where
    F: Fn(&BTreeMap<HookPoint, PruneSpec>) -> Result<(SparsityReport, f64, f64)> + Sync,
{
    check_grid("up/gate", grid_up_gate)?;
    check_grid("down", grid_down)?;
    let points: Vec<SiteTargets> = grid_up_gate
        .iter()
        .flat_map(|&u| grid_down.iter().map(move |&d| SiteTargets::new(u, d)))
        .collect();
    let mut entries = points
        .par_iter()
        .map(|&targets| {
            let specs = calibrate_sequential(
                model,
                calib_stream,
                targets,
                options.estimator,
                options.centering,
                &options.calibration,
            )?;
            let (report, error, quality) = eval(&specs)?;
            Ok(SweepEntry {
                label: scap_label(targets),
                targets,
                report,
                error,
                quality,
                dominant: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let objectives: Vec<(f64, f64)> = entries.iter().map(|e| (e.report.ffn_sparsity, e.quality)).collect();
    let dominant = pareto_front(&objectives);
    for &i in &dominant {
        entries[i].dominant = true;
    }
    Ok(SweepResult {
        grid_up_gate: grid_up_gate.to_vec(),
        grid_down: grid_down.to_vec(),
        entries,
        dominant,
    })
}

/// Sweep scored by reconstruction error on held-out data (`quality = -error`).
pub fn pareto_sweep(
    model: &Model,
    calib_stream: &[DenseMatrix],
    eval_stream: &[DenseMatrix],
    grid_up_gate: &[f64],
    grid_down: &[f64],
    options: &SweepOptions,
) -> Result<SweepResult> {
    pareto_sweep_with(model, calib_stream, grid_up_gate, grid_down, options, |specs| {
        let (report, error) = evaluate(model, specs, eval_stream, true)?;
        Ok((report, error, -error))
    })
}
