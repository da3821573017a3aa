//! Versioned JSON reports.
//!
//! Every report is an envelope `{version, kind, config, data}`. Struct
//! fields serialize in declaration order and maps are ordered, so equal
//! values always produce identical bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{AblationResult, BenchTable, OverlapCurve, SweepResult};
use crate::calib::CalibrationReport;
use crate::error::{Error, Result};

pub const REPORT_VERSION: &str = "scap-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Calibration,
    Sweep,
    Bench,
    Overlap,
    Ablation,
    Roundtrip,
}

/// Payload types that can travel in a report envelope.
pub trait ReportData: Serialize + DeserializeOwned {
    const KIND: ReportKind;

    /// Semantic checks beyond the serde schema.
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report<T> {
    pub version: String,
    pub kind: ReportKind,
    /// The effective configuration that produced `data`.
    pub config: serde_json::Value,
    pub data: T,
}

impl<T: ReportData> Report<T> {
    pub fn new(config: &impl Serialize, data: T) -> Result<Self> {
        Ok(Self {
            version: REPORT_VERSION.into(),
            kind: T::KIND,
            config: serde_json::to_value(config)?,
            data,
        })
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn encode_report<T: ReportData>(report: &Report<T>) -> Result<Vec<u8>> {
    report.data.validate()?;
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}

/// Parses a report, checking the version before the schema.
pub fn decode_report<T: ReportData>(bytes: &[u8]) -> Result<Report<T>> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Validation(format!("not JSON: {e}")))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Validation("missing `version`".into()))?;
    if version != REPORT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.into(),
            expected: REPORT_VERSION.into(),
        });
    }
    let report: Report<T> = serde_json::from_value(value).map_err(|e| Error::Validation(e.to_string()))?;
    if report.kind != T::KIND {
        return Err(Error::Validation(format!(
            "expected a {:?} report, found {:?}",
            T::KIND,
            report.kind
        )));
    }
    report.data.validate()?;
    Ok(report)
}

pub fn save_report<T: ReportData>(report: &Report<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_report(report)?).map_err(|e| Error::io(path, e))
}

pub fn load_report<T: ReportData>(path: impl AsRef<Path>) -> Result<Report<T>> {
    let path = path.as_ref();
    decode_report(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

impl ReportData for CalibrationReport {
    const KIND: ReportKind = ReportKind::Calibration;

    fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            for (s, &tau) in &layer.tau_by_sparsity {
                let s: f64 = s
                    .parse()
                    .map_err(|_| Error::Validation(format!("{}: bad sparsity key `{s}`", layer.layer_id)))?;
                fraction("target sparsity", s)?;
                if !(tau >= 0.0 && tau.is_finite()) {
                    return Err(Error::Validation(format!("{}: tau {tau} at s = {s}", layer.layer_id)));
                }
            }
        }
        for spec in &self.prune_specs {
            spec.validate().map_err(|e| Error::Validation(e.to_string()))?;
        }
        Ok(())
    }
}

impl ReportData for SweepResult {
    const KIND: ReportKind = ReportKind::Sweep;

    fn validate(&self) -> Result<()> {
        if self.entries.len() != self.grid_up_gate.len() * self.grid_down.len() {
            return Err(Error::Validation("sweep entries do not cover the grid".into()));
        }
        for e in &self.entries {
            fraction("ffn_sparsity", e.report.ffn_sparsity)?;
            fraction("up_gate", e.report.up_gate.observed)?;
            fraction("down", e.report.down.observed)?;
        }
        if self.dominant.iter().any(|&i| i >= self.entries.len()) {
            return Err(Error::Validation("dominant index out of range".into()));
        }
        Ok(())
    }
}

impl ReportData for BenchTable {
    const KIND: ReportKind = ReportKind::Bench;

    fn validate(&self) -> Result<()> {
        for r in &self.rows {
            fraction("target_sparsity", r.target_sparsity)?;
            fraction("observed_sparsity", r.observed_sparsity)?;
            if r.macs > r.dense_macs {
                return Err(Error::Validation(format!("{} row uses more MACs than dense", r.scheme.as_str())));
            }
        }
        Ok(())
    }
}

impl ReportData for OverlapCurve {
    const KIND: ReportKind = ReportKind::Overlap;

    fn validate(&self) -> Result<()> {
        if self.batch_sizes.len() != self.overlap_sparsity.len() {
            return Err(Error::Validation("batch_sizes and overlap_sparsity differ in length".into()));
        }
        fraction("per_vector_sparsity", self.per_vector_sparsity)?;
        self.overlap_sparsity.iter().try_for_each(|&o| fraction("overlap", o))
    }
}

impl ReportData for AblationResult {
    const KIND: ReportKind = ReportKind::Ablation;

    fn validate(&self) -> Result<()> {
        for r in &self.rows {
            fraction("target", r.target)?;
            fraction("observed_with", r.observed_with)?;
            fraction("observed_without", r.observed_without)?;
        }
        Ok(())
    }
}
