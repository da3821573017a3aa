//! Dense, CATS and SCAP SwiGLU kernels side by side: MAC counts across
//! target FFN sparsities, then a batch-1 wall-clock loop.
//!
//! cargo run --release --example kernels

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scap::analysis::{bench_cats, bench_scap, mac_bench};
use scap::kernels::{cats_swiglu, dense_swiglu, scap_swiglu, SwiGluWeights};
use scap::tensor::DenseMatrix;

fn main() -> scap::Result<()> {
    let (d, h) = (128, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let std_in = 1.0 / (d as f32).sqrt();
    let w = SwiGluWeights::new(
        DenseMatrix::random_normal(d, h, std_in, &mut rng),
        DenseMatrix::random_normal(d, h, std_in, &mut rng),
        DenseMatrix::random_normal(h, d, 1.0 / (h as f32).sqrt(), &mut rng),
    )?;
    let calib = DenseMatrix::random_normal(1024, d, 1.0, &mut rng);
    let eval = DenseMatrix::random_normal(64, d, 1.0, &mut rng);

    let table = mac_bench(&w, &calib, &eval, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])?;
    table.write_csv(std::io::stdout())?;

    let scap = bench_scap(&w, &calib, &eval, 0.42, 0.617)?;
    let cats = bench_cats(&w, &calib, &eval, 0.5)?;
    println!(
        "\nSCAP (0.42, 0.617) saves {:.1}% of MACs, CATS at 50% saves {:.1}%: {:.2}x",
        100.0 * (1.0 - scap.macs_ratio),
        100.0 * (1.0 - cats.macs_ratio),
        (1.0 - scap.macs_ratio) / (1.0 - cats.macs_ratio)
    );

    // Rough hand-picked thresholds; the loop only measures time.
    let x = DenseMatrix::random_normal(1, d, 1.0, &mut rng);
    let reps = 2000;
    let time = |label: &str, f: &dyn Fn() -> scap::Result<()>| -> scap::Result<()> {
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        println!("{label:<6} {:>8.2} us/call", t.elapsed().as_secs_f64() * 1e6 / reps as f64);
        Ok(())
    };
    println!();
    time("dense", &|| dense_swiglu(&x, &w).map(drop))?;
    time("cats", &|| cats_swiglu(0.35, &x, &w).map(drop))?;
    time("scap", &|| scap_swiglu(0.55, 0.05, &x, &w, 0.0, 0.0).map(drop))?;
    Ok(())
}
