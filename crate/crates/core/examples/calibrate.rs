//! Calibrate a small SwiGLU stack and inspect thresholds, mode estimates
//! and the sparsity the resulting specs reach on held-out data.
//!
//! cargo run --release --example calibrate

use std::collections::BTreeSet;

use scap::analysis::measure_sparsity;
use scap::calib::{
    calibrate_sequential, collect_stats, CalibrationConfig, CenteringPolicy, ModeEstimator, SiteTargets,
};
use scap::data::{gaussian_stream, StreamConfig};
use scap::model::{init_weights, BlockConfig};

fn main() -> scap::Result<()> {
    let model = init_weights(&BlockConfig::swiglu(32, 128, 2), 7)?;
    let sc = StreamConfig {
        n_sequences: 16,
        seq_len: 128,
        scale: 1.0,
    };
    let calib = gaussian_stream(&sc, 32, 1)?;
    let held_out = gaussian_stream(&sc, 32, 2)?;
    let cfg = CalibrationConfig::default();

    let hooks: BTreeSet<_> = model.hook_points().into_iter().collect();
    let stats = collect_stats(&model, &calib, &hooks, &cfg)?;
    println!("{:<24} {:>8} {:>8} {:>8} {:>9} {:>9}", "layer", "tau@0.3", "tau@0.5", "tau@0.7", "eta mean", "eta kde");
    for (id, s) in &stats {
        let t = s.thresholds(&[0.3, 0.5, 0.7])?;
        println!(
            "{id:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
            t[0],
            t[1],
            t[2],
            s.estimate_mode(ModeEstimator::Mean)?,
            s.estimate_mode(ModeEstimator::kde())?
        );
    }

    let targets = SiteTargets::new(0.4, 0.6);
    let specs = calibrate_sequential(&model, &calib, targets, ModeEstimator::Mean, CenteringPolicy::default(), &cfg)?;
    let report = measure_sparsity(&model, &specs, &held_out)?;
    println!("\ntargets up/gate {:.2}, down {:.2}", targets.up_gate, targets.down);
    for h in &report.hooks {
        println!("  {:<24} observed {:.3}", h.hook, h.observed_sparsity);
    }
    println!("FFN sparsity {:.3}, MAC ratio {:.3}", report.ffn_sparsity, report.macs_ratio);
    Ok(())
}
