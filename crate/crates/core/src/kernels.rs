//! Feed-forward execution schemes with deterministic op counting.
//!
//! * [`dense_swiglu`]: reference `(silu(x Wg) * (x Wu)) Wd`.
//! * [`cats_swiglu`]: post-SiLU pruning. The gate path runs densely, and one
//!   mask over `|silu(x Wg)| >= tau` selects both the Up columns computed
//!   and the Down rows read.
//! * [`scap_swiglu`]: input pruning. `x` is pruned once for Up and Gate,
//!   and the gated intermediate is pruned on its own before Down.
//! * [`scap_gelu_mlp`]: input pruning of a two-layer GELU MLP with a mode
//!   shift on the Down input folded into the Down bias.
//!
//! Sparse products gather the surviving input channels and skip the
//! corresponding weight rows entirely. `macs` counts multiply-accumulates
//! actually executed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::{fuse_bias, Cut, PrunedRows};
use crate::tensor::{accumulate_row, gelu_scalar, silu_scalar, DenseMatrix, DenseVector};

/// Work performed by one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    pub channels_skipped: u64,
    pub elements_pruned: u64,
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.channels_skipped += rhs.channels_skipped;
        self.elements_pruned += rhs.elements_pruned;
    }
}

/// Weights of a SwiGLU block: `w_gate`, `w_up` are `d x h`, `w_down` is `h x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluWeights {
    w_gate: DenseMatrix,
    w_up: DenseMatrix,
    w_down: DenseMatrix,
}

impl SwiGluWeights {
    pub fn new(w_gate: DenseMatrix, w_up: DenseMatrix, w_down: DenseMatrix) -> Result<Self> {
        if w_gate.shape() != w_up.shape() {
            return Err(Error::Shape(format!(
                "gate {:?} and up {:?} differ",
                w_gate.shape(),
                w_up.shape()
            )));
        }
        if w_down.rows() != w_up.cols() {
            return Err(Error::Shape(format!(
                "down has {} input channels, hidden width is {}",
                w_down.rows(),
                w_up.cols()
            )));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_up.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_down.cols()
    }

    pub fn w_gate(&self) -> &DenseMatrix {
        &self.w_gate
    }

    pub fn w_up(&self) -> &DenseMatrix {
        &self.w_up
    }

    pub fn w_down(&self) -> &DenseMatrix {
        &self.w_down
    }

    /// MACs of one dense forward over `batch` rows.
    pub fn dense_macs(&self, batch: usize) -> u64 {
        let (d, h, o) = (self.d_model(), self.d_hidden(), self.d_out());
        (batch * (2 * d * h + h * o)) as u64
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::Shape(format!(
                "input has {} channels, block expects {}",
                x.cols(),
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Weights of a GELU MLP: `w_up: d x h` with `b_up`, `w_down: h x d` with `b_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeluMlpWeights {
    w_up: DenseMatrix,
    b_up: DenseVector,
    w_down: DenseMatrix,
    b_down: DenseVector,
}

impl GeluMlpWeights {
    pub fn new(
        w_up: DenseMatrix,
        b_up: DenseVector,
        w_down: DenseMatrix,
        b_down: DenseVector,
    ) -> Result<Self> {
        if b_up.len() != w_up.cols() || w_down.rows() != w_up.cols() || b_down.len() != w_down.cols() {
            return Err(Error::Shape(format!(
                "up {:?} (+{}), down {:?} (+{}) do not chain",
                w_up.shape(),
                b_up.len(),
                w_down.shape(),
                b_down.len()
            )));
        }
        Ok(Self {
            w_up,
            b_up,
            w_down,
            b_down,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_up.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_down.cols()
    }

    pub fn w_up(&self) -> &DenseMatrix {
        &self.w_up
    }

    pub fn b_up(&self) -> &DenseVector {
        &self.b_up
    }

    pub fn w_down(&self) -> &DenseMatrix {
        &self.w_down
    }

    pub fn b_down(&self) -> &DenseVector {
        &self.b_down
    }

    pub fn dense_macs(&self, batch: usize) -> u64 {
        (batch * (self.d_model() * self.d_hidden() + self.d_hidden() * self.d_out())) as u64
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::Shape(format!(
                "input has {} channels, block expects {}",
                x.cols(),
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Sparse GEMM over the survivors in `sel`: for every row, accumulate the
/// weight rows of the kept channels in ascending channel order.
pub(crate) fn gather_matmul(
    sel: &PrunedRows,
    w: &DenseMatrix,
    bias: Option<&[f32]>,
) -> (DenseMatrix, u64) {
    debug_assert_eq!(sel.cols, w.rows());
    let oc = w.cols();
    let mut out = DenseMatrix::zeros(sel.rows, oc);
    let mut acc = vec![0.0f64; oc];
    for i in 0..sel.rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let (idx, vals) = sel.row(i);
        for (&k, &v) in idx.iter().zip(vals) {
            accumulate_row(&mut acc, f64::from(v), w.row(k));
        }
        let row = out.row_mut(i);
        for (o, a) in row.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
        if let Some(b) = bias {
            for (o, b) in row.iter_mut().zip(b) {
                *o += *b;
            }
        }
    }
    (out, (sel.kept() * oc) as u64)
}

/// Result of one instrumented block forward: output, op count, and the
/// pruned views of each FC input (for sparsity bookkeeping).
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub output: DenseMatrix,
    pub ops: OpCount,
    /// (pruned, total) at the Up/Gate input.
    pub up_gate: (usize, usize),
    /// (pruned, total) at the Down input.
    pub down: (usize, usize),
    pub up_gate_mask: Option<crate::prune::Mask>,
    pub down_mask: Option<crate::prune::Mask>,
    /// Down input before its shift and pruning.
    pub down_input: Option<DenseMatrix>,
}

/// SwiGLU with optional input pruning on Up/Gate and Down. `None` leaves a
/// site dense; a dense site reproduces [`dense_swiglu`] bit for bit.
pub(crate) fn swiglu_sites(
    x: &DenseMatrix,
    w: &SwiGluWeights,
    up_gate: Option<Cut>,
    down: Option<Cut>,
    want_masks: bool,
) -> BlockTrace {
    let sel_x = PrunedRows::select(x, up_gate);
    let bias_for = |m: &DenseMatrix, cut: Option<Cut>| match cut {
        Some(c) if c.eta != 0.0 => Some(fuse_bias(m, None, c.eta)),
        _ => None,
    };
    let up_bias = bias_for(&w.w_up, up_gate);
    let gate_bias = bias_for(&w.w_gate, up_gate);
    let (up, macs_up) = gather_matmul(&sel_x, &w.w_up, up_bias.as_deref());
    let (gate, macs_gate) = gather_matmul(&sel_x, &w.w_gate, gate_bias.as_deref());
    let gated = glu(&up, &gate);

    let sel_g = PrunedRows::select(&gated, down);
    let down_bias = bias_for(&w.w_down, down);
    let (output, macs_down) = gather_matmul(&sel_g, &w.w_down, down_bias.as_deref());

    let pruned = (sel_x.pruned() + sel_g.pruned()) as u64;
    BlockTrace {
        output,
        ops: OpCount {
            macs: macs_up + macs_gate + macs_down,
            channels_skipped: pruned,
            elements_pruned: pruned,
        },
        up_gate: (sel_x.pruned(), sel_x.total()),
        down: (sel_g.pruned(), sel_g.total()),
        up_gate_mask: want_masks.then(|| sel_x.mask()),
        down_mask: want_masks.then(|| sel_g.mask()),
        down_input: want_masks.then_some(gated),
    }
}

/// `up * silu(gate)`, elementwise.
fn glu(up: &DenseMatrix, gate: &DenseMatrix) -> DenseMatrix {
    let mut out = up.clone();
    for (o, &g) in out.as_mut_slice().iter_mut().zip(gate.as_slice()) {
        *o *= silu_scalar(g);
    }
    out
}

/// GELU MLP with optional pruning of the Up input (no shift) and of the
/// mode-shifted Down input.
pub(crate) fn gelu_mlp_sites(
    x: &DenseMatrix,
    w: &GeluMlpWeights,
    up: Option<Cut>,
    down: Option<Cut>,
    want_masks: bool,
) -> BlockTrace {
    let sel_x = PrunedRows::select(x, up);
    let up_bias = match up {
        Some(c) if c.eta != 0.0 => fuse_bias(&w.w_up, Some(&w.b_up), c.eta),
        _ => w.b_up.as_slice().to_vec(),
    };
    let (pre, macs_up) = gather_matmul(&sel_x, &w.w_up, Some(&up_bias));
    let hidden = pre.map(gelu_scalar);

    let sel_h = PrunedRows::select(&hidden, down);
    let down_bias = match down {
        Some(c) if c.eta != 0.0 => fuse_bias(&w.w_down, Some(&w.b_down), c.eta),
        _ => w.b_down.as_slice().to_vec(),
    };
    let (output, macs_down) = gather_matmul(&sel_h, &w.w_down, Some(&down_bias));
    let pruned = (sel_x.pruned() + sel_h.pruned()) as u64;
    BlockTrace {
        output,
        ops: OpCount {
            macs: macs_up + macs_down,
            channels_skipped: pruned,
            elements_pruned: pruned,
        },
        up_gate: (sel_x.pruned(), sel_x.total()),
        down: (sel_h.pruned(), sel_h.total()),
        up_gate_mask: want_masks.then(|| sel_x.mask()),
        down_mask: want_masks.then(|| sel_h.mask()),
        down_input: want_masks.then_some(hidden),
    }
}

fn check_tau(tau: f32, name: &str) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("{name} must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// Dense SwiGLU reference.
pub fn dense_swiglu(x: &DenseMatrix, w: &SwiGluWeights) -> Result<(DenseMatrix, OpCount)> {
    w.check_input(x)?;
    let t = swiglu_sites(x, w, None, None, false);
    Ok((t.output, t.ops))
}

/// CATS SwiGLU: `v = silu(x Wg)`, `mask = |v| >= tau`, then Up columns and
/// Down rows restricted to the mask. `v` is reused on the kept positions.
pub fn cats_swiglu(tau_silu: f32, x: &DenseMatrix, w: &SwiGluWeights) -> Result<(DenseMatrix, OpCount)> {
    let (y, ops, _) = cats_swiglu_traced(tau_silu, x, w)?;
    Ok((y, ops))
}

/// [`cats_swiglu`] that also returns the post-SiLU mask.
pub fn cats_swiglu_traced(
    tau_silu: f32,
    x: &DenseMatrix,
    w: &SwiGluWeights,
) -> Result<(DenseMatrix, OpCount, crate::prune::Mask)> {
    w.check_input(x)?;
    check_tau(tau_silu, "tau_silu")?;
    let (d, h, o) = (w.d_model(), w.d_hidden(), w.d_out());
    let all = PrunedRows::select(x, None);
    let (gate, gate_macs) = gather_matmul(&all, &w.w_gate, None);
    let v = gate.map(silu_scalar);

    let mut out = DenseMatrix::zeros(x.rows(), o);
    let mut kept_bits = vec![false; x.rows() * h];
    let mut acc = vec![0.0f64; o];
    let mut macs = gate_macs;
    let mut skipped = 0u64;
    for i in 0..x.rows() {
        let xr = x.row(i);
        let vr = v.row(i);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..h {
            if vr[j].abs() < tau_silu {
                skipped += 1;
                continue;
            }
            kept_bits[i * h + j] = true;
            // column j of W_up, then row j of W_down
            let mut up = 0.0f64;
            for (k, &xv) in xr.iter().enumerate() {
                up += f64::from(xv) * f64::from(w.w_up.get(k, j));
            }
            let x1 = (up as f32) * vr[j];
            accumulate_row(&mut acc, f64::from(x1), w.w_down.row(j));
            macs += (d + o) as u64;
        }
        for (dst, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *dst = *a as f32;
        }
    }
    let mask = crate::prune::Mask::new(x.rows(), h, kept_bits)?;
    Ok((
        out,
        OpCount {
            macs,
            channels_skipped: skipped,
            elements_pruned: skipped,
        },
        mask,
    ))
}

/// SCAP SwiGLU. `x` is shifted by `eta_x` and pruned once with `tau_x` for
/// both Up and Gate; the gated product is shifted by `eta_gated` and pruned
/// with `tau_gated` before Down. Shifts are compensated in fused biases.
pub fn scap_swiglu(
    tau_x: f32,
    tau_gated: f32,
    x: &DenseMatrix,
    w: &SwiGluWeights,
    eta_x: f32,
    eta_gated: f32,
) -> Result<(DenseMatrix, OpCount)> {
    let t = scap_swiglu_traced(tau_x, tau_gated, x, w, eta_x, eta_gated)?;
    Ok((t.output, t.ops))
}

/// Observed sparsities of one SCAP SwiGLU call.
#[derive(Debug, Clone)]
pub struct ScapTrace {
    pub output: DenseMatrix,
    pub ops: OpCount,
    pub s_x: f64,
    pub s_gated: f64,
    pub x_mask: crate::prune::Mask,
    pub gated_mask: crate::prune::Mask,
}

pub fn scap_swiglu_traced(
    tau_x: f32,
    tau_gated: f32,
    x: &DenseMatrix,
    w: &SwiGluWeights,
    eta_x: f32,
    eta_gated: f32,
) -> Result<ScapTrace> {
    w.check_input(x)?;
    check_tau(tau_x, "tau_x")?;
    check_tau(tau_gated, "tau_gated")?;
    let t = swiglu_sites(
        x,
        w,
        Some(Cut { tau: tau_x, eta: eta_x }),
        Some(Cut {
            tau: tau_gated,
            eta: eta_gated,
        }),
        true,
    );
    let frac = |(p, n): (usize, usize)| if n == 0 { 0.0 } else { p as f64 / n as f64 };
    Ok(ScapTrace {
        s_x: frac(t.up_gate),
        s_gated: frac(t.down),
        x_mask: t.up_gate_mask.expect("masks requested"),
        gated_mask: t.down_mask.expect("masks requested"),
        output: t.output,
        ops: t.ops,
    })
}

/// Dense GELU MLP reference.
pub fn dense_gelu_mlp(x: &DenseMatrix, w: &GeluMlpWeights) -> Result<(DenseMatrix, OpCount)> {
    w.check_input(x)?;
    let t = gelu_mlp_sites(x, w, None, None, false);
    Ok((t.output, t.ops))
}

/// SCAP on a GELU MLP: `x` pruned with `tau_x` into Up; the GELU output is
/// shifted by `eta_h`, pruned with `tau_h` and fed to Down, whose bias
/// absorbs `eta_h · colsum(W_down)`.
pub fn scap_gelu_mlp(
    tau_x: f32,
    tau_h: f32,
    eta_h: f32,
    x: &DenseMatrix,
    w: &GeluMlpWeights,
) -> Result<(DenseMatrix, OpCount)> {
    w.check_input(x)?;
    check_tau(tau_x, "tau_x")?;
    check_tau(tau_h, "tau_h")?;
    let t = gelu_mlp_sites(
        x,
        w,
        Some(Cut { tau: tau_x, eta: 0.0 }),
        Some(Cut { tau: tau_h, eta: eta_h }),
        false,
    );
    Ok((t.output, t.ops))
}

fn check_unit(v: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// FFN sparsity of a SwiGLU block pruned at its inputs: the Up and Gate
/// layers see `s_x`, Down sees `s_gated`, all three layers equally sized.
pub fn ffn_sparsity(s_x: f64, s_gated: f64) -> Result<f64> {
    check_unit(s_x, "s_x")?;
    check_unit(s_gated, "s_gated")?;
    Ok((2.0 * s_x + s_gated) / 3.0)
}

/// FFN sparsity of CATS: the mask removes Up columns and Down rows, the
/// Gate layer stays dense.
pub fn cats_ffn_sparsity(s_silu: f64) -> Result<f64> {
    check_unit(s_silu, "s_silu")?;
    Ok(2.0 * s_silu / 3.0)
}

/// FFN sparsity of a two-layer MLP with equally sized Up and Down.
pub fn mlp_ffn_sparsity(s_x: f64, s_h: f64) -> Result<f64> {
    check_unit(s_x, "s_x")?;
    check_unit(s_h, "s_h")?;
    Ok((s_x + s_h) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::quantile::{quantile_sorted, sorted_copy};
    use crate::tensor::{gelu, matmul, silu};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn swiglu(d: usize, h: usize, seed: u64) -> SwiGluWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_in = 1.0 / (d as f32).sqrt();
        let s_hid = 1.0 / (h as f32).sqrt();
        SwiGluWeights::new(
            DenseMatrix::random_normal(d, h, s_in, &mut rng),
            DenseMatrix::random_normal(d, h, s_in, &mut rng),
            DenseMatrix::random_normal(h, d, s_hid, &mut rng),
        )
        .unwrap()
    }

    fn gelu_mlp(d: usize, h: usize, offset: f32, seed: u64) -> GeluMlpWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeluMlpWeights::new(
            DenseMatrix::random_normal(d, h, 1.0 / (d as f32).sqrt(), &mut rng),
            DenseVector::filled(h, offset),
            DenseMatrix::random_normal(h, d, 1.0 / (h as f32).sqrt(), &mut rng),
            DenseVector::filled(d, 0.1),
        )
        .unwrap()
    }

    /// Composition of plain tensor ops.
    fn composed_swiglu(x: &DenseMatrix, w: &SwiGluWeights) -> DenseMatrix {
        let g = silu(&matmul(x, w.w_gate()).unwrap());
        let u = matmul(x, w.w_up()).unwrap();
        matmul(&u.hadamard(&g).unwrap(), w.w_down()).unwrap()
    }

    fn composed_gelu(x: &DenseMatrix, w: &GeluMlpWeights) -> DenseMatrix {
        let h = gelu(&matmul(x, w.w_up()).unwrap().add_bias(w.b_up()).unwrap());
        matmul(&h, w.w_down()).unwrap().add_bias(w.b_down()).unwrap()
    }

    #[test]
    fn weight_shapes_validated() {
        let a = DenseMatrix::zeros(4, 8);
        assert!(SwiGluWeights::new(a.clone(), DenseMatrix::zeros(4, 7), DenseMatrix::zeros(8, 4)).is_err());
        assert!(SwiGluWeights::new(a.clone(), a.clone(), DenseMatrix::zeros(7, 4)).is_err());
        assert!(GeluMlpWeights::new(a, DenseVector::zeros(7), DenseMatrix::zeros(8, 4), DenseVector::zeros(4)).is_err());
    }

    #[test]
    fn dense_zero_input() {
        let w = swiglu(4, 8, 0);
        let (y, ops) = dense_swiglu(&DenseMatrix::zeros(1, 4), &w).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(ops.macs, 96);
    }

    #[test]
    fn dense_matches_composition() {
        let w = swiglu(16, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseMatrix::random_normal(3, 16, 1.0, &mut rng);
        let (y, _) = dense_swiglu(&x, &w).unwrap();
        assert!(y.max_abs_diff(&composed_swiglu(&x, &w)).unwrap() < 1e-5);
    }

    #[test]
    fn shape_errors() {
        let w = swiglu(4, 8, 0);
        let x = DenseMatrix::zeros(1, 5);
        assert!(matches!(dense_swiglu(&x, &w), Err(Error::Shape(_))));
        assert!(matches!(cats_swiglu(0.0, &x, &w), Err(Error::Shape(_))));
        assert!(matches!(scap_swiglu(0.0, 0.0, &x, &w, 0.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn cats_zero_threshold_is_dense() {
        let w = swiglu(8, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseMatrix::random_normal(4, 8, 1.0, &mut rng);
        let (a, _) = dense_swiglu(&x, &w).unwrap();
        let (b, ops) = cats_swiglu(0.0, &x, &w).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        assert_eq!(ops.macs, w.dense_macs(4));
    }

    #[test]
    fn cats_full_mask_leaves_gate_only() {
        let w = swiglu(8, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DenseMatrix::random_normal(2, 8, 1.0, &mut rng);
        let (y, ops) = cats_swiglu(1e9, &x, &w).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(ops.macs, 2 * 8 * 16);
    }

    #[test]
    fn cats_median_threshold_macs() {
        let (d, h) = (16, 64);
        let w = swiglu(d, h, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DenseMatrix::random_normal(1, d, 1.0, &mut rng);
        let v = silu(&matmul(&x, w.w_gate()).unwrap());
        let sorted = sorted_copy(v.as_slice().iter().map(|a| a.abs()));
        let tau = quantile_sorted(&sorted, 0.5) as f32;
        let kept = v.as_slice().iter().filter(|a| a.abs() >= tau).count();
        let (_, ops) = cats_swiglu(tau, &x, &w).unwrap();
        assert_eq!(ops.macs, (d * h + 2 * kept * d) as u64);
        assert!((kept as i64 - (h / 2) as i64).abs() <= 1);
    }

    #[test]
    fn cats_matches_post_silu_zeroing() {
        let w = swiglu(8, 32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = DenseMatrix::random_normal(3, 8, 1.0, &mut rng);
        let tau = 0.1;
        let g = silu(&matmul(&x, w.w_gate()).unwrap()).map(|v| if v.abs() >= tau { v } else { 0.0 });
        let u = matmul(&x, w.w_up()).unwrap();
        let want = matmul(&u.hadamard(&g).unwrap(), w.w_down()).unwrap();
        let (y, _) = cats_swiglu(tau, &x, &w).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn scap_half_pruned_row() {
        let (d, h) = (8, 16);
        let w = swiglu(d, h, 11);
        let x = DenseMatrix::new(1, d, vec![0.01, 1.0, -0.02, -1.5, 0.03, 2.0, 0.0, -0.7]).unwrap();
        let t = scap_swiglu_traced(0.1, 0.0, &x, &w, 0.0, 0.0).unwrap();
        let kept_x = 4;
        assert_eq!(t.x_mask.kept_count(), kept_x);
        let kept_g = t.gated_mask.kept_count();
        assert_eq!(t.ops.macs, (2 * kept_x * h + kept_g * d) as u64);
    }

    #[test]
    fn scap_mode_shift_equivalence() {
        let w = swiglu(8, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = DenseMatrix::random_normal(2, 8, 1.0, &mut rng);
        let (a, _) = dense_swiglu(&x, &w).unwrap();
        let (b, _) = scap_swiglu(0.0, 0.0, &x, &w, 0.3, -0.2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }

    #[test]
    fn gelu_dense_and_identities() {
        let w = gelu_mlp(8, 32, 1.2, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = DenseMatrix::random_normal(4, 8, 1.0, &mut rng);
        let want = composed_gelu(&x, &w);
        let (dense, ops) = dense_gelu_mlp(&x, &w).unwrap();
        assert!(dense.max_abs_diff(&want).unwrap() < 1e-5);
        assert_eq!(ops.macs, w.dense_macs(4));
        let (y0, _) = scap_gelu_mlp(0.0, 0.0, 0.0, &x, &w).unwrap();
        assert!(y0.max_abs_diff(&want).unwrap() < 1e-5);
        let (y1, _) = scap_gelu_mlp(0.0, 0.0, 0.9, &x, &w).unwrap();
        assert!(y1.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn ffn_sparsity_accounting() {
        assert!((ffn_sparsity(0.5, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((ffn_sparsity(0.42, 0.617).unwrap() - 0.4857).abs() < 1e-4);
        assert_eq!(ffn_sparsity(0.0, 0.0).unwrap(), 0.0);
        assert!((cats_ffn_sparsity(0.5).unwrap() - 0.3333).abs() < 1e-4);
        assert!(matches!(ffn_sparsity(1.2, 0.0), Err(Error::Domain(_))));
        assert!(matches!(cats_ffn_sparsity(-0.1), Err(Error::Domain(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn zero_threshold_schemes_agree(d in 1usize..=64, h in 1usize..=256, n in 1usize..=8, seed in any::<u64>()) {
            let w = swiglu(d, h, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = DenseMatrix::random_normal(n, d, 1.0, &mut rng);
            let (a, _) = dense_swiglu(&x, &w).unwrap();
            let (b, _) = cats_swiglu(0.0, &x, &w).unwrap();
            let (c, _) = scap_swiglu(0.0, 0.0, &x, &w, 0.0, 0.0).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
            prop_assert!(a.max_abs_diff(&c).unwrap() < 1e-5);
        }

        #[test]
        fn scap_macs_proportional(tx in 0.0f32..2.0, tg in 0.0f32..0.5, seed in any::<u64>()) {
            let (d, h, n) = (12, 24, 3);
            let w = swiglu(d, h, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = DenseMatrix::random_normal(n, d, 1.0, &mut rng);
            let t = scap_swiglu_traced(tx, tg, &x, &w, 0.0, 0.0).unwrap();
            let ratio = t.ops.macs as f64 / w.dense_macs(n) as f64;
            let ffn = ffn_sparsity(t.s_x, t.s_gated).unwrap();
            prop_assert!((ratio - (1.0 - ffn)).abs() < 1e-12);
        }

        #[test]
        fn cats_mask_couples_up_and_down(tau in 0.0f32..0.5, seed in any::<u64>()) {
            let (d, h, n) = (8, 32, 2);
            let w = swiglu(d, h, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let x = DenseMatrix::random_normal(n, d, 1.0, &mut rng);
            let (_, ops, mask) = cats_swiglu_traced(tau, &x, &w).unwrap();
            // each kept channel costs one Up column (d) and one Down row (d)
            let kept = mask.kept_count();
            prop_assert_eq!(ops.macs, (n * d * h + kept * 2 * d) as u64);
            prop_assert_eq!(ops.channels_skipped as usize, n * h - kept);
        }

        #[test]
        fn scap_masks_decoupled(tx in 0.0f32..1.5, tg1 in 0.0f32..0.5, tg2 in 0.0f32..0.5, seed in any::<u64>()) {
            let (d, h, n) = (8, 32, 2);
            let w = swiglu(d, h, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
            let x = DenseMatrix::random_normal(n, d, 1.0, &mut rng);
            let a = scap_swiglu_traced(tx, tg1, &x, &w, 0.0, 0.0).unwrap();
            let b = scap_swiglu_traced(tx, tg2, &x, &w, 0.0, 0.0).unwrap();
            prop_assert_eq!(a.x_mask, b.x_mask);
            // the gated mask is the pruner applied to whatever gated tensor
            // the (tau_x-pruned) input produced, nothing more
            let xp = crate::prune::prune_activations(&x, tx).unwrap().0;
            let gated = matmul(&xp, w.w_up()).unwrap()
                .hadamard(&silu(&matmul(&xp, w.w_gate()).unwrap())).unwrap();
            let want = crate::prune::prune_activations(&gated, tg1).unwrap().1;
            prop_assert_eq!(a.gated_mask, want);
        }
    }
}
