use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ffn_sparsity, mlp_ffn_sparsity};
use crate::model::{FfnKind, HookPoint, HookSite, Model};
use crate::prune::PruneSpec;
use crate::tensor::DenseMatrix;

/// Observed pruning at one hook point over a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookSparsity {
    pub hook: String,
    /// 0 when the hook was left dense.
    pub target_sparsity: f64,
    pub observed_sparsity: f64,
    pub pruned: u64,
    pub total: u64,
}

/// Target and observation for one site kind, pooled over blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSparsity {
    pub target: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityReport {
    pub ffn_kind: FfnKind,
    pub hooks: Vec<HookSparsity>,
    /// Shared input of Up and Gate (Up alone for a GELU MLP).
    pub up_gate: SiteSparsity,
    pub down: SiteSparsity,
    /// MAC-weighted average of the site sparsities.
    pub ffn_sparsity: f64,
    pub macs: u64,
    pub dense_macs: u64,
    pub macs_ratio: f64,
    /// Vectors evaluated.
    pub sample_count: u64,
}

impl SparsityReport {
    /// Up, Gate, Down and FFN columns in percent; Gate is `None` for a GELU MLP.
    pub fn table_row(&self) -> [Option<f64>; 4] {
        let pct = |v: f64| Some(100.0 * v);
        let gate = match self.ffn_kind {
            FfnKind::SwiGlu => pct(self.up_gate.observed),
            FfnKind::GeluMlp => None,
        };
        [pct(self.up_gate.observed), gate, pct(self.down.observed), pct(self.ffn_sparsity)]
    }
}

/// FFN sparsity of a block kind from its two site sparsities.
pub fn block_ffn_sparsity(kind: FfnKind, up_gate: f64, down: f64) -> Result<f64> {
    match kind {
        FfnKind::SwiGlu => ffn_sparsity(up_gate, down),
        FfnKind::GeluMlp => mlp_ffn_sparsity(up_gate, down),
    }
}

/// Runs `eval_stream` through the model pruned by `specs` and tallies
/// per-hook pruning and op counts.
pub fn measure_sparsity(
    model: &Model,
    specs: &BTreeMap<HookPoint, PruneSpec>,
    eval_stream: &[DenseMatrix],
) -> Result<SparsityReport> {
    Ok(evaluate(model, specs, eval_stream, false)?.0)
}

/// `sqrt(sum |y' - y|^2 / sum |y|^2)` of the pruned model against the dense one.
pub fn reconstruction_error(
    model: &Model,
    specs: &BTreeMap<HookPoint, PruneSpec>,
    eval_stream: &[DenseMatrix],
) -> Result<f64> {
    Ok(evaluate(model, specs, eval_stream, true)?.1)
}

/// Sparsity report and relative reconstruction error in one pass.
pub fn evaluate(
    model: &Model,
    specs: &BTreeMap<HookPoint, PruneSpec>,
    eval_stream: &[DenseMatrix],
    with_error: bool,
) -> Result<(SparsityReport, f64)> {
    if eval_stream.is_empty() {
        return Err(Error::EmptyStream("evaluation stream has no batches".into()));
    }
    let sparse = model.apply_prune_specs(specs.clone())?;
    let mut counts: BTreeMap<HookPoint, (u64, u64)> = BTreeMap::new();
    let (mut macs, mut dense_macs, mut samples) = (0u64, 0u64, 0u64);
    let (mut err2, mut ref2) = (0.0f64, 0.0f64);
    for x in eval_stream {
        let run = sparse.forward_traced(x, false)?;
        for (h, c) in &run.counts {
            let e = counts.entry(*h).or_default();
            e.0 += c.pruned as u64;
            e.1 += c.total as u64;
        }
        macs += run.ops.macs;
        dense_macs += run.dense_macs;
        samples += x.rows() as u64;
        if with_error {
            let y = model.forward(x)?;
            for (&a, &b) in run.output.as_slice().iter().zip(y.as_slice()) {
                err2 += (f64::from(a) - f64::from(b)).powi(2);
                ref2 += f64::from(b).powi(2);
            }
        }
    }

    let target_of = |h: &HookPoint| specs.get(h).map_or(0.0, |s| s.target_sparsity);
    let site = |which: HookSite| {
        let (mut p, mut t, mut tgt, mut n) = (0u64, 0u64, 0.0, 0usize);
        for (h, &(hp, ht)) in counts.iter().filter(|(h, _)| h.site == which) {
            p += hp;
            t += ht;
            tgt += target_of(h);
            n += 1;
        }
        SiteSparsity {
            target: if n == 0 { 0.0 } else { tgt / n as f64 },
            observed: if t == 0 { 0.0 } else { p as f64 / t as f64 },
        }
    };
    let up_gate = site(HookSite::UpGateInput);
    let down = site(HookSite::DownInput);
    let kind = model.config().ffn_kind;
    let report = SparsityReport {
        ffn_kind: kind,
        hooks: counts
            .iter()
            .map(|(h, &(p, t))| HookSparsity {
                hook: h.layer_id(),
                target_sparsity: target_of(h),
                observed_sparsity: if t == 0 { 0.0 } else { p as f64 / t as f64 },
                pruned: p,
                total: t,
            })
            .collect(),
        up_gate,
        down,
        ffn_sparsity: block_ffn_sparsity(kind, up_gate.observed, down.observed)?,
        macs,
        dense_macs,
        macs_ratio: if dense_macs == 0 { 1.0 } else { macs as f64 / dense_macs as f64 },
        sample_count: samples,
    };
    let error = if ref2 > 0.0 { (err2 / ref2).sqrt() } else { err2.sqrt() };
    Ok((report, error))
}
