//! Grid over Up/Gate and Down target sparsities with the Pareto front of
//! FFN sparsity against reconstruction error.
//!
//! cargo run --release --example pareto_sweep

use scap::analysis::{pareto_sweep, SweepOptions};
use scap::data::{gaussian_stream, StreamConfig};
use scap::model::{init_weights, BlockConfig};

fn main() -> scap::Result<()> {
    let model = init_weights(&BlockConfig::swiglu(32, 96, 2), 9)?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 64,
        scale: 1.0,
    };
    let calib = gaussian_stream(&sc, 32, 10)?;
    let eval = gaussian_stream(&sc, 32, 11)?;
    let r = pareto_sweep(&model, &calib, &eval, &[0.2, 0.4, 0.6], &[0.4, 0.6, 0.8], &SweepOptions::default())?;
    println!("{:<38} {:>6} {:>6} {:>6} {:>6} {:>9}", "", "Up", "Gate", "Down", "FFN", "error");
    for e in &r.entries {
        let [up, gate, down, ffn] = e.report.table_row().map(|v| v.unwrap_or(f64::NAN));
        let mark = if e.dominant { "*" } else { "" };
        println!(
            "{:<38} {up:>6.1} {gate:>6.1} {down:>6.1} {ffn:>6.1} {:>9.4}{mark}",
            e.label, e.error
        );
    }
    println!("\n* on the Pareto front ({} of {})", r.dominant.len(), r.entries.len());
    Ok(())
}
