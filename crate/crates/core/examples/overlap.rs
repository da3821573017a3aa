//! Fraction of channels pruned for every vector of a batch, as the batch
//! grows, for independent and correlated inputs.
//!
//! cargo run --release --example overlap

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scap::analysis::{independent_overlap, overlap_curve};
use scap::calib::{calibrate_sequential, CalibrationConfig, CenteringPolicy, ModeEstimator, SiteTargets};
use scap::data::{correlated_batch, gaussian_stream, StreamConfig};
use scap::model::{init_weights, BlockConfig, HookPoint};

fn main() -> scap::Result<()> {
    let d = 64;
    let model = init_weights(&BlockConfig::swiglu(d, 256, 2), 5)?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 128,
        scale: 1.0,
    };
    let calib = gaussian_stream(&sc, d, 6)?;
    let specs = calibrate_sequential(
        &model,
        &calib,
        SiteTargets::uniform(0.6),
        ModeEstimator::Mean,
        CenteringPolicy::default(),
        &CalibrationConfig::default(),
    )?;
    let sizes = [1, 2, 4, 8, 16];
    let hook = HookPoint::down(1);
    println!("{:>5} {:>10} {:>10} {:>10}", "k", "s^k", "rho=0", "rho=0.8");
    let curves = [0.0, 0.8]
        .iter()
        .map(|&rho| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            overlap_curve(&model, &specs, hook, |k| correlated_batch(k, d, rho, &mut rng), &sizes, 32)
        })
        .collect::<scap::Result<Vec<_>>>()?;
    let s = curves[0].per_vector_sparsity;
    for (i, &k) in sizes.iter().enumerate() {
        println!(
            "{k:>5} {:>10.4} {:>10.4} {:>10.4}",
            independent_overlap(s, k),
            curves[0].overlap_sparsity[i],
            curves[1].overlap_sparsity[i]
        );
    }
    Ok(())
}
