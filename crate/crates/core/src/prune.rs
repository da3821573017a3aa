//! The magnitude pruner and mode-centered sparse FC layers.
//!
//! Pruning keeps `x` where `|x| > tau` (strict) and zeroes the rest. A
//! [`SparseLinear`] additionally subtracts a frozen mode shift `eta` from its
//! input before pruning and folds `eta · colsum(W)` into its bias, so that
//! with `tau = 0` it computes exactly the same function as the dense layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gather_matmul, OpCount};
use crate::tensor::{DenseMatrix, DenseVector};

/// Boolean matrix of kept positions (`true` = survives pruning).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    kept: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} mask bits for a {rows}x{cols} mask",
                kept.len()
            )));
        }
        Ok(Self { rows, cols, kept })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.kept[row * self.cols + col]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.kept[i * self.cols..(i + 1) * self.cols]
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.kept.len() - self.kept_count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.kept.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.kept.len() as f64
    }
}

/// Calibrated parameters of one pruning site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub layer_id: String,
    pub tau: f32,
    pub eta: f32,
    pub target_sparsity: f64,
}

impl PruneSpec {
    pub fn new(layer_id: impl Into<String>, tau: f32, eta: f32, target_sparsity: f64) -> Result<Self> {
        let spec = Self {
            layer_id: layer_id.into(),
            tau,
            eta,
            target_sparsity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !self.eta.is_finite() {
            return Err(Error::Domain(format!("eta must be finite, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Domain(format!(
                "target sparsity {} outside [0, 1]",
                self.target_sparsity
            )));
        }
        Ok(())
    }
}

/// Threshold applied to one FC input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cut {
    pub tau: f32,
    pub eta: f32,
}

/// Row-compressed survivors of a pruned activation: per row, the kept
/// channel indices (ascending) and their shifted values.
#[derive(Debug, Clone)]
pub(crate) struct PrunedRows {
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f32>,
}

impl PrunedRows {
    /// Applies `cut` to `x`; `None` keeps every element unshifted.
    pub fn select(x: &DenseMatrix, cut: Option<Cut>) -> Self {
        let (rows, cols) = x.shape();
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for row in x.row_iter() {
            for (j, &v) in row.iter().enumerate() {
                match cut {
                    None => {
                        indices.push(j);
                        values.push(v);
                    }
                    Some(Cut { tau, eta }) => {
                        let shifted = v - eta;
                        if shifted.abs() > tau {
                            indices.push(j);
                            values.push(shifted);
                        }
                    }
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f32]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn kept(&self) -> usize {
        self.indices.len()
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pruned(&self) -> usize {
        self.total() - self.kept()
    }

    pub fn mask(&self) -> Mask {
        let mut kept = vec![false; self.total()];
        for i in 0..self.rows {
            for &j in self.row(i).0 {
                kept[i * self.cols + j] = true;
            }
        }
        Mask {
            rows: self.rows,
            cols: self.cols,
            kept,
        }
    }

    /// Dense view with pruned positions zeroed.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (idx, vals) = self.row(i);
            let r = out.row_mut(i);
            for (&j, &v) in idx.iter().zip(vals) {
                r[j] = v;
            }
        }
        out
    }
}

/// Zeroes every element with `|x| <= tau`.
pub fn prune_activations(x: &DenseMatrix, tau: f32) -> Result<(DenseMatrix, Mask)> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Domain(format!("tau must be >= 0, got {tau}")));
    }
    let sel = PrunedRows::select(x, Some(Cut { tau, eta: 0.0 }));
    Ok((sel.to_dense(), sel.mask()))
}

/// Frozen FC layer with a fused bias, a threshold and a mode shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinear {
    weight: DenseMatrix,
    bias_fused: DenseVector,
    tau: f32,
    eta: f32,
}

/// `bias + eta · colsum(weight)`, rounded once to `f32`.
pub(crate) fn fuse_bias(weight: &DenseMatrix, bias: Option<&DenseVector>, eta: f32) -> Vec<f32> {
    let sums = weight.column_sums();
    sums.iter()
        .enumerate()
        .map(|(j, s)| {
            let b = bias.map_or(0.0, |b| f64::from(b.as_slice()[j]));
            (b + f64::from(eta) * s) as f32
        })
        .collect()
}

impl SparseLinear {
    pub fn new(weight: DenseMatrix, bias: &DenseVector, spec: &PruneSpec) -> Result<Self> {
        spec.validate()?;
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for a weight with {} output channels",
                bias.len(),
                weight.cols()
            )));
        }
        let bias_fused = DenseVector::new(fuse_bias(&weight, Some(bias), spec.eta));
        Ok(Self {
            weight,
            bias_fused,
            tau: spec.tau,
            eta: spec.eta,
        })
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias_fused(&self) -> &DenseVector {
        &self.bias_fused
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn eta(&self) -> f32 {
        self.eta
    }

    /// `prune(x - eta, tau) · W + b_fused`, skipping the weight rows of
    /// pruned input channels.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, OpCount)> {
        if x.cols() != self.weight.rows() {
            return Err(Error::Shape(format!(
                "input has {} channels, layer expects {}",
                x.cols(),
                self.weight.rows()
            )));
        }
        let sel = PrunedRows::select(
            x,
            Some(Cut {
                tau: self.tau,
                eta: self.eta,
            }),
        );
        let (y, macs) = gather_matmul(&sel, &self.weight, Some(self.bias_fused.as_slice()));
        let pruned = sel.pruned() as u64;
        Ok((
            y,
            OpCount {
                macs,
                channels_skipped: pruned,
                elements_pruned: pruned,
            },
        ))
    }
}

/// Reference for the online-mode formulation: each row gets its own shift
/// `eta_of(row)`, and `eta · colsum(W)` is recomputed per row instead of
/// being fused offline.
pub fn forward_dynamic_eta(
    weight: &DenseMatrix,
    bias: &DenseVector,
    x: &DenseMatrix,
    tau: f32,
    eta_of: impl Fn(&[f32]) -> f32,
) -> Result<DenseMatrix> {
    if x.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(Error::Shape(format!(
            "input {:?}, weight {:?}, bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let sums = weight.column_sums();
    let mut out = DenseMatrix::zeros(x.rows(), weight.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let eta = eta_of(row);
        let mut acc: Vec<f64> = sums
            .iter()
            .zip(bias.as_slice())
            .map(|(s, &b)| f64::from(eta) * s + f64::from(b))
            .collect();
        for (k, &v) in row.iter().enumerate() {
            let shifted = v - eta;
            if shifted.abs() > tau {
                crate::tensor::accumulate_row(&mut acc, f64::from(shifted), weight.row(k));
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}
