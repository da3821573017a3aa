use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calib::LayerStats;
use crate::error::{Error, Result};
use crate::kernels::{
    cats_ffn_sparsity, cats_swiglu_traced, dense_swiglu, ffn_sparsity, scap_swiglu_traced, SwiGluWeights,
};
use crate::prune::prune_activations;
use crate::tensor::{matmul, silu, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Dense,
    Cats,
    Scap,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Dense => "dense",
            Scheme::Cats => "cats",
            Scheme::Scap => "scap",
        }
    }
}

/// One kernel run: op counts against the dense count for the same batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRow {
    pub scheme: Scheme,
    pub d: usize,
    pub h: usize,
    pub batch: usize,
    /// FFN sparsity the thresholds were calibrated for.
    pub target_sparsity: f64,
    /// FFN sparsity derived from the observed masks.
    pub observed_sparsity: f64,
    pub macs: u64,
    pub dense_macs: u64,
    pub macs_ratio: f64,
    /// Observed sparsity of each pruned tensor: `x` and `gated` for SCAP,
    /// `silu` for CATS.
    pub sites: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "scheme",
            "d",
            "h",
            "batch",
            "target_sparsity",
            "observed_sparsity",
            "macs",
            "dense_macs",
            "macs_ratio",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.scheme.as_str().to_string(),
                r.d.to_string(),
                r.h.to_string(),
                r.batch.to_string(),
                format!("{}", r.target_sparsity),
                format!("{:.6}", r.observed_sparsity),
                r.macs.to_string(),
                r.dense_macs.to_string(),
                format!("{:.6}", r.macs_ratio),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn abs_quantile(values: &DenseMatrix, s: f64) -> Result<f32> {
    let mut stats = LayerStats::new("bench", values.len().max(1), 0);
    stats.observe(values);
    stats.quantile_threshold(s)
}

fn row(scheme: Scheme, w: &SwiGluWeights, batch: usize, target: f64, observed: f64, macs: u64) -> BenchRow {
    let dense_macs = w.dense_macs(batch);
    BenchRow {
        scheme,
        d: w.d_model(),
        h: w.d_hidden(),
        batch,
        target_sparsity: target,
        observed_sparsity: observed,
        macs,
        dense_macs,
        macs_ratio: macs as f64 / dense_macs as f64,
        sites: Vec::new(),
    }
}

pub fn bench_dense(w: &SwiGluWeights, eval: &DenseMatrix) -> Result<BenchRow> {
    let (_, ops) = dense_swiglu(eval, w)?;
    Ok(row(Scheme::Dense, w, eval.rows(), 0.0, 0.0, ops.macs))
}

/// SCAP with thresholds taken from `calib` so that the input and the gated
/// product reach `s_x` and `s_gated`.
pub fn bench_scap(
    w: &SwiGluWeights,
    calib: &DenseMatrix,
    eval: &DenseMatrix,
    s_x: f64,
    s_gated: f64,
) -> Result<BenchRow> {
    let target = ffn_sparsity(s_x, s_gated)?;
    let tau_x = abs_quantile(calib, s_x)?;
    let (xp, _) = prune_activations(calib, tau_x)?;
    let gated = matmul(&xp, w.w_up())?.hadamard(&silu(&matmul(&xp, w.w_gate())?))?;
    let tau_gated = abs_quantile(&gated, s_gated)?;
    let t = scap_swiglu_traced(tau_x, tau_gated, eval, w, 0.0, 0.0)?;
    let mut r = row(
        Scheme::Scap,
        w,
        eval.rows(),
        target,
        ffn_sparsity(t.s_x, t.s_gated)?,
        t.ops.macs,
    );
    r.sites = vec![("x".into(), t.s_x), ("gated".into(), t.s_gated)];
    Ok(r)
}

/// CATS with the post-SiLU threshold taken from `calib` at `s_silu`.
pub fn bench_cats(w: &SwiGluWeights, calib: &DenseMatrix, eval: &DenseMatrix, s_silu: f64) -> Result<BenchRow> {
    let target = cats_ffn_sparsity(s_silu)?;
    let v = silu(&matmul(calib, w.w_gate())?);
    let tau = abs_quantile(&v, s_silu)?;
    let (_, ops, mask) = cats_swiglu_traced(tau, eval, w)?;
    let observed = mask.sparsity();
    let mut r = row(
        Scheme::Cats,
        w,
        eval.rows(),
        target,
        cats_ffn_sparsity(observed)?,
        ops.macs,
    );
    r.sites = vec![("silu".into(), observed)];
    Ok(r)
}

/// A dense row, then for every target FFN sparsity `f` a SCAP row with
/// `s_x = s_gated = f` and a CATS row with `s_silu = 3f/2` (skipped when
/// that exceeds 1).
pub fn mac_bench(w: &SwiGluWeights, calib: &DenseMatrix, eval: &DenseMatrix, targets: &[f64]) -> Result<BenchTable> {
    let mut rows = vec![bench_dense(w, eval)?];
    for &f in targets {
        let mut scap = bench_scap(w, calib, eval, f, f)?;
        scap.target_sparsity = f;
        rows.push(scap);
        let s_silu = 1.5 * f;
        if s_silu <= 1.0 {
            let mut cats = bench_cats(w, calib, eval, s_silu)?;
            cats.target_sparsity = f;
            rows.push(cats);
        }
    }
    Ok(BenchTable { rows })
}
