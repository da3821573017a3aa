//! Linear-interpolation quantiles over sorted samples.
//!
//! For `n` sorted values and probability `p`, the position is `h = (n - 1) p`
//! and the result interpolates between `v[floor(h)]` and `v[floor(h) + 1]`.

use crate::error::{Error, Result};

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Quantile of an ascending slice. `sorted` must be non-empty.
pub fn quantile_sorted(sorted: &[f32], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return f64::from(sorted[0]);
    }
    let h = (n - 1) as f64 * p;
    let lo = (h.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    let a = f64::from(sorted[lo]);
    let b = f64::from(sorted[hi]);
    a + frac * (b - a)
}

pub(crate) fn sorted_copy(values: impl IntoIterator<Item = f32>) -> Vec<f32> {
    let mut v: Vec<f32> = values.into_iter().collect();
    v.sort_unstable_by(f32::total_cmp);
    v
}
