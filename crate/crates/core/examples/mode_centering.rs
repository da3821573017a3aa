//! Mode centering on a GELU MLP whose Down-input distribution peaks away
//! from zero: achievable sparsity at a fixed error budget with and without
//! the shift, plus the fixed-threshold effect on a mixture sample.
//!
//! cargo run --release --example mode_centering

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scap::analysis::{fixed_threshold_gain, mode_centering_ablation, shifted_gelu_mixture, AblationOptions};
use scap::calib::ModeEstimator;
use scap::data::{gaussian_stream, StreamConfig};
use scap::model::{init_weights, BlockConfig};

fn main() -> scap::Result<()> {
    let model = init_weights(&BlockConfig::gelu(32, 128, 1, 1.2), 1)?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 64,
        scale: 0.25,
    };
    let calib = gaussian_stream(&sc, 32, 2)?;
    let eval = gaussian_stream(&sc, 32, 3)?;
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let r = mode_centering_ablation(&model, &calib, &eval, &grid, &AblationOptions::default())?;
    r.write_csv(std::io::stdout())?;
    println!(
        "\nat {:.0}% relative error: {:.1}% sparsity with the shift, {:.1}% without",
        100.0 * r.error_budget,
        100.0 * r.achievable_with,
        100.0 * r.achievable_without
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = shifted_gelu_mixture(100_000, &mut rng);
    let g = fixed_threshold_gain(&sample, 0.05, ModeEstimator::kde())?;
    println!(
        "mixture, tau 0.05: eta {:.3}, sparsity {:.3} -> {:.3}",
        g.eta, g.sparsity_without, g.sparsity_with
    );
    Ok(())
}
