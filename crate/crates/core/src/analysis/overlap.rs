use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, Model};
use crate::prune::PruneSpec;
use crate::tensor::DenseMatrix;

/// Fraction of positions pruned in every vector of a batch, i.e. the
/// weight rows the whole batch can skip. Masks mark kept positions with `true`.
pub fn overlap_sparsity<M: AsRef<[bool]>>(masks: &[M]) -> Result<f64> {
    let first = masks
        .first()
        .ok_or_else(|| Error::EmptyStream("overlap needs at least one mask".into()))?
        .as_ref();
    let len = first.len();
    if let Some(bad) = masks.iter().find(|m| m.as_ref().len() != len) {
        return Err(Error::Shape(format!(
            "mask lengths differ: {len} vs {}",
            bad.as_ref().len()
        )));
    }
    if len == 0 {
        return Ok(0.0);
    }
    let common = (0..len)
        .filter(|&j| masks.iter().all(|m| !m.as_ref()[j]))
        .count();
    Ok(common as f64 / len as f64)
}

/// Expected overlap of `k` independent masks each pruning a fraction `s`.
pub fn independent_overlap(s: f64, k: usize) -> f64 {
    s.powi(k as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapCurve {
    pub hook: String,
    pub batch_sizes: Vec<usize>,
    pub overlap_sparsity: Vec<f64>,
    pub per_vector_sparsity: f64,
}

impl OverlapCurve {
    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.batch_sizes.iter().copied().zip(self.overlap_sparsity.iter().copied())
    }

    /// `(batch_size, overlap, independent)` rows, the last column being
    /// `per_vector^k`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["batch_size", "overlap", "independent"])?;
        for (k, o) in self.points() {
            out.write_record([
                k.to_string(),
                format!("{o:.6}"),
                format!("{:.6}", independent_overlap(self.per_vector_sparsity, k)),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Averages overlap sparsity at `hook` over `trials` generated batches.
///
/// Each trial draws one batch of the largest size and evaluates its
/// prefixes, so smaller batches are nested in larger ones and the curve
/// cannot increase. `per_vector_sparsity` is the mean sparsity of a single
/// vector (the first row of each batch).
pub fn overlap_curve<G>(
    model: &Model,
    specs: &BTreeMap<HookPoint, PruneSpec>,
    hook: HookPoint,
    mut generate: G,
    batch_sizes: &[usize],
    trials: usize,
) -> Result<OverlapCurve>
where
    G: FnMut(usize) -> Result<DenseMatrix>,
{
    model.check_hook(&hook)?;
    if batch_sizes.is_empty() || trials == 0 {
        return Err(Error::Config("overlap curve needs batch sizes and at least one trial".into()));
    }
    if batch_sizes[0] == 0 || batch_sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("batch sizes must be positive and ascending".into()));
    }
    let k_max = *batch_sizes.last().unwrap_or(&1);
    let sparse = model.apply_prune_specs(specs.clone())?;
    let mut sums = vec![0.0f64; batch_sizes.len()];
    let mut single = 0.0f64;
    for _ in 0..trials {
        let batch = generate(k_max)?;
        if batch.rows() != k_max {
            return Err(Error::Shape(format!(
                "generator returned {} rows, expected {k_max}",
                batch.rows()
            )));
        }
        let run = sparse.forward_traced(&batch, true)?;
        let mask = run
            .masks
            .get(&hook)
            .ok_or_else(|| Error::InvalidHook(format!("{hook}: no mask recorded")))?;
        let rows: Vec<&[bool]> = (0..k_max).map(|i| mask.row(i)).collect();
        single += overlap_sparsity(&rows[..1])?;
        for (acc, &k) in sums.iter_mut().zip(batch_sizes) {
            *acc += overlap_sparsity(&rows[..k])?;
        }
    }
    let n = trials as f64;
    Ok(OverlapCurve {
        hook: hook.layer_id(),
        batch_sizes: batch_sizes.to_vec(),
        overlap_sparsity: sums.into_iter().map(|s| s / n).collect(),
        per_vector_sparsity: single / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate_sequential, CalibrationConfig, CenteringPolicy, ModeEstimator, SiteTargets};
    use crate::data::{correlated_batch, gaussian_stream, StreamConfig};
    use crate::model::{init_weights, BlockConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_mask_is_its_own_sparsity() {
        let m = [true, false, false, true, false];
        assert!((overlap_sparsity(&[m]).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn complementary_masks_share_nothing() {
        let a = [true, false, true, false];
        let b = [false, true, false, true];
        assert_eq!(overlap_sparsity(&[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_and_empty() {
        let masks: Vec<Vec<bool>> = vec![vec![true; 3], vec![true; 4]];
        assert!(matches!(overlap_sparsity(&masks), Err(Error::Shape(_))));
        let none: [Vec<bool>; 0] = [];
        assert!(overlap_sparsity(&none).is_err());
    }

    #[test]
    fn independent_masks_follow_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, n) = (0.7, 10_000);
        for k in 1..=6 {
            let masks: Vec<Vec<bool>> = (0..k)
                .map(|_| (0..n).map(|_| rng.random::<f64>() >= s).collect())
                .collect();
            let p = independent_overlap(s, k);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let got = overlap_sparsity(&masks).unwrap();
            assert!((got - p).abs() <= 3.0 * se, "k={k}: {got} vs {p}");
        }
    }

    fn setup() -> (Model, BTreeMap<HookPoint, PruneSpec>) {
        let m = init_weights(&BlockConfig::swiglu(16, 64, 1), 2).unwrap();
        let calib = gaussian_stream(
            &StreamConfig {
                n_sequences: 8,
                seq_len: 64,
                scale: 1.0,
            },
            16,
            3,
        )
        .unwrap();
        let specs = calibrate_sequential(
            &m,
            &calib,
            SiteTargets::uniform(0.6),
            ModeEstimator::Mean,
            CenteringPolicy::default(),
            &CalibrationConfig::default(),
        )
        .unwrap();
        (m, specs)
    }

    #[test]
    fn curve_starts_at_per_vector_and_never_rises() {
        let (m, specs) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = overlap_curve(&m, &specs, HookPoint::down(0), |k| correlated_batch(k, 16, 0.5, &mut rng), &[1, 2, 4, 8], 20)
            .unwrap();
        assert_eq!(c.overlap_sparsity[0], c.per_vector_sparsity);
        assert!(c.overlap_sparsity.windows(2).all(|w| w[1] <= w[0]));
        assert!(c.overlap_sparsity.iter().all(|&o| o <= c.per_vector_sparsity));
    }

    #[test]
    fn correlated_batches_decay_slower() {
        let (m, specs) = setup();
        let sizes = [1, 2, 4, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ind = overlap_curve(&m, &specs, HookPoint::up_gate(0), |k| correlated_batch(k, 16, 0.0, &mut rng), &sizes, 50)
            .unwrap();
        let cor = overlap_curve(&m, &specs, HookPoint::up_gate(0), |k| correlated_batch(k, 16, 0.9, &mut rng), &sizes, 50)
            .unwrap();
        for i in 1..sizes.len() {
            assert!(cor.overlap_sparsity[i] > ind.overlap_sparsity[i]);
        }
    }

    #[test]
    fn bad_batch_sizes_rejected() {
        let (m, specs) = setup();
        let gen = |k| Ok(DenseMatrix::zeros(k, 16));
        assert!(overlap_curve(&m, &specs, HookPoint::down(0), gen, &[4, 2], 1).is_err());
        assert!(overlap_curve(&m, &specs, HookPoint::down(0), gen, &[0, 2], 1).is_err());
        assert!(overlap_curve(&m, &specs, HookPoint::down(5), gen, &[1], 1).is_err());
    }

    proptest! {
        #[test]
        fn overlap_never_exceeds_smallest_sparsity(masks in proptest::collection::vec(
            proptest::collection::vec(any::<bool>(), 32), 1..6)) {
            let o = overlap_sparsity(&masks).unwrap();
            for m in &masks {
                prop_assert!(o <= overlap_sparsity(&[m]).unwrap());
            }
        }
    }
}
