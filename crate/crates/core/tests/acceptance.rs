//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! cargo test --release -p scap --test acceptance

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scap::analysis::{
    bench_cats, bench_scap, dominates, fixed_threshold_gain, mac_bench, measure_sparsity, mode_centering_ablation,
    overlap_curve, overlap_sparsity, pareto_sweep, shifted_gelu_mixture, AblationOptions, Scheme, SweepOptions,
};
use scap::calib::{calibrate_sequential, CalibrationConfig, CenteringPolicy, LayerStats, ModeEstimator, SiteTargets};
use scap::data::{correlated_batch, gaussian_stream, StreamConfig};
use scap::io::{decode_model, encode_model, load_model, save_model};
use scap::kernels::{cats_ffn_sparsity, cats_swiglu, dense_swiglu, ffn_sparsity, scap_swiglu, SwiGluWeights};
use scap::model::{init_weights, BlockConfig, HookPoint};
use scap::prune::{prune_activations, PruneSpec, SparseLinear};
use scap::tensor::{DenseMatrix, DenseVector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::random_normal(rows, cols, std, rng)
}

/// `x W + b` with f64 accumulation, written out longhand.
fn affine_oracle(x: &DenseMatrix, w: &DenseMatrix, b: &[f32]) -> Vec<f64> {
    let (n, d, o) = (x.rows(), w.rows(), w.cols());
    let mut y = vec![0.0; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = f64::from(b[j]);
            for k in 0..d {
                acc += f64::from(x.get(i, k)) * f64::from(w.get(k, j));
            }
            y[i * o + j] = acc;
        }
    }
    y
}

fn silu64(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Dense SwiGLU in f64: `(silu(x Wg) * (x Wu)) Wd`.
fn swiglu_oracle(x: &DenseMatrix, w: &SwiGluWeights) -> Vec<f64> {
    let zeros_h = vec![0.0; w.d_hidden()];
    let g = affine_oracle(x, w.w_gate(), &zeros_h);
    let u = affine_oracle(x, w.w_up(), &zeros_h);
    let h = w.d_hidden();
    let o = w.d_out();
    let mut y = vec![0.0; x.rows() * o];
    for i in 0..x.rows() {
        for j in 0..h {
            let a = silu64(g[i * h + j]) * u[i * h + j];
            for c in 0..o {
                y[i * o + c] += a * f64::from(w.w_down().get(j, c));
            }
        }
    }
    y
}

fn max_diff(a: &DenseMatrix, oracle: &[f64]) -> f64 {
    a.as_slice()
        .iter()
        .zip(oracle)
        .map(|(&v, &o)| (f64::from(v) - o).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let d = rng.random_range(1..=256);
        let o = rng.random_range(1..=256);
        let batch = rng.random_range(1..=8);
        let w = normal_matrix(d, o, 1.0 / (d as f32).sqrt(), &mut rng);
        let b: Vec<f32> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta: f32 = rng.random_range(-1.0..1.0);
        let x = normal_matrix(batch, d, 1.0, &mut rng);
        let spec = PruneSpec::new(format!("layer{t}"), 0.0, eta, 0.0).map_err(|e| e.to_string())?;
        let layer = SparseLinear::new(w.clone(), &DenseVector::new(b.clone()), &spec).map_err(|e| e.to_string())?;
        let (y, _) = layer.forward(&x).map_err(|e| e.to_string())?;
        let err = max_diff(&y, &affine_oracle(&x, &w, &b));
        worst = worst.max(err);
        ensure(err <= 1e-5, || format!("layer {t} ({d}x{o}, eta {eta}): max error {err:.3e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("100 layers, max error {worst:.2e}, {:.2} s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    // A skewed, shifted distribution so the check is not specific to a
    // symmetric Gaussian.
    let draw = |seed: u64| -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..100_000)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                0.3 + z + 0.4 * z.abs()
            })
            .collect();
        DenseMatrix::new(1000, 100, v).expect("1e5 elements")
    };
    let calib = draw(201);
    let held_out = draw(202);
    let mut stats = LayerStats::new("c2", 100_000, 0);
    stats.observe(&calib);
    let mut worst = 0.0f64;
    for i in 1..=9 {
        let s = f64::from(i) / 10.0;
        let tau = stats.quantile_threshold(s).map_err(|e| e.to_string())?;
        let (_, mask) = prune_activations(&held_out, tau).map_err(|e| e.to_string())?;
        let dev = (mask.sparsity() - s).abs();
        worst = worst.max(dev);
        ensure(dev <= 0.02, || format!("s = {s}: observed {:.4}", mask.sparsity()))?;
    }
    Ok(format!("9 targets, max deviation {worst:.4}"))
}

fn criterion_3() -> Outcome {
    let sc = StreamConfig {
        n_sequences: 16,
        seq_len: 256,
        scale: 1.0,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for config in [BlockConfig::swiglu(32, 128, 4), BlockConfig::gelu(32, 128, 4, 1.2)] {
        let model = init_weights(&config, 301).map_err(|e| e.to_string())?;
        let calib = gaussian_stream(&sc, 32, 302).map_err(|e| e.to_string())?;
        let held_out = gaussian_stream(&sc, 32, 303).map_err(|e| e.to_string())?;
        for i in 2..=8 {
            let s = f64::from(i) / 10.0;
            let specs = calibrate_sequential(
                &model,
                &calib,
                SiteTargets::uniform(s),
                ModeEstimator::Mean,
                CenteringPolicy::default(),
                &CalibrationConfig::default(),
            )
            .map_err(|e| e.to_string())?;
            let report = measure_sparsity(&model, &specs, &held_out).map_err(|e| e.to_string())?;
            for h in &report.hooks {
                let dev = (h.observed_sparsity - s).abs();
                worst = worst.max(dev);
                checked += 1;
                ensure(dev <= 0.03, || {
                    format!("{} {}: target {s}, observed {:.4}", config.ffn_kind, h.hook, h.observed_sparsity)
                })?;
            }
        }
    }
    Ok(format!("{checked} hook/target pairs on 4-block stacks, max deviation {worst:.4}"))
}

fn criterion_4() -> Outcome {
    let scap = ffn_sparsity(0.42, 0.617).map_err(|e| e.to_string())?;
    ensure((scap - 0.4857).abs() <= 0.001, || format!("ffn_sparsity(0.42, 0.617) = {scap}"))?;
    let cats = cats_ffn_sparsity(0.5).map_err(|e| e.to_string())?;
    ensure((100.0 * cats - 33.3).abs() < 0.05, || format!("CATS 50% gives {cats}"))?;
    // two more reference operating points: (up/gate, down) -> FFN percent
    for (up, down, ffn) in [(0.229, 0.617, 35.8), (0.428, 0.814, 55.7)] {
        let v = 100.0 * ffn_sparsity(up, down).map_err(|e| e.to_string())?;
        ensure((v - ffn).abs() < 0.05, || format!("ffn_sparsity({up}, {down}) = {v:.2}%, table says {ffn}"))?;
    }
    Ok(format!("SCAP {:.4}, CATS {:.1}%", scap, 100.0 * cats))
}

fn swiglu_weights(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<SwiGluWeights, String> {
    let s = 1.0 / (d as f32).sqrt();
    SwiGluWeights::new(
        normal_matrix(d, h, s, rng),
        normal_matrix(d, h, s, rng),
        normal_matrix(h, d, 1.0 / (h as f32).sqrt(), rng),
    )
    .map_err(|e| e.to_string())
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let w = swiglu_weights(64, 256, &mut rng)?;
    let calib = normal_matrix(2048, 64, 1.0, &mut rng);
    let eval = normal_matrix(256, 64, 1.0, &mut rng);
    let table = mac_bench(&w, &calib, &eval, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).map_err(|e| e.to_string())?;
    let (mut scap_rows, mut cats_rows) = (0, 0);
    for r in &table.rows {
        match r.scheme {
            Scheme::Scap => {
                let (s_x, s_g) = (r.sites[0].1, r.sites[1].1);
                let expect = 1.0 - (2.0 * s_x + s_g) / 3.0;
                ensure((r.macs_ratio - expect).abs() <= 1e-6, || format!("SCAP {r:?}"))?;
                scap_rows += 1;
            }
            Scheme::Cats => {
                let expect = 1.0 - 2.0 / 3.0 * r.sites[0].1;
                ensure((r.macs_ratio - expect).abs() <= 0.01, || format!("CATS {r:?}"))?;
                cats_rows += 1;
            }
            Scheme::Dense => ensure(r.macs == r.dense_macs, || "dense row".into())?,
        }
    }
    ensure(scap_rows == 6 && cats_rows == 6, || format!("{scap_rows} SCAP rows, {cats_rows} CATS rows"))?;
    let scap = bench_scap(&w, &calib, &eval, 0.42, 0.617).map_err(|e| e.to_string())?;
    let cats = bench_cats(&w, &calib, &eval, 0.5).map_err(|e| e.to_string())?;
    let ratio = (1.0 - scap.macs_ratio) / (1.0 - cats.macs_ratio);
    ensure(ratio >= 1.4, || format!("savings ratio {ratio:.3}"))?;
    Ok(format!("MAC accounting holds on 12 rows, SCAP/CATS savings {ratio:.3}x"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let model = init_weights(&BlockConfig::gelu(32, 128, 1, 1.2), 1).map_err(|e| e.to_string())?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 64,
        scale: 0.25,
    };
    let calib = gaussian_stream(&sc, 32, 2).map_err(|e| e.to_string())?;
    let eval = gaussian_stream(&sc, 32, 3).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (1..=9).map(|i| f64::from(i) / 10.0).collect();
    let r = mode_centering_ablation(&model, &calib, &eval, &grid, &AblationOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(r.gain >= 0.30, || {
        format!("gain {:.3} ({:.3} vs {:.3})", r.gain, r.achievable_with, r.achievable_without)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let sample = shifted_gelu_mixture(100_000, &mut rng);
    let g = fixed_threshold_gain(&sample, 0.05, ModeEstimator::kde()).map_err(|e| e.to_string())?;
    ensure(g.gain >= 0.30, || format!("fixed-threshold gain {:.3}", g.gain))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "achievable {:.1}% vs {:.1}% (+{:.1} points), mixture +{:.1} points, {:.1} s",
        100.0 * r.achievable_with,
        100.0 * r.achievable_without,
        100.0 * r.gain,
        100.0 * g.gain,
        elapsed.as_secs_f64()
    ))
}

fn criterion_7() -> Outcome {
    // Independent Bernoulli masks: P(pruned) = s per channel.
    let s = 0.6;
    let (channels, trials) = (512, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    for k in [1usize, 2, 4, 8] {
        let mut total = 0.0;
        for _ in 0..trials {
            let masks: Vec<Vec<bool>> = (0..k)
                .map(|_| (0..channels).map(|_| rng.random::<f64>() >= s).collect())
                .collect();
            total += overlap_sparsity(&masks).map_err(|e| e.to_string())?;
        }
        let measured = total / trials as f64;
        let p = s.powi(k as i32);
        let se = (p * (1.0 - p) / (channels * trials) as f64).sqrt();
        ensure((measured - p).abs() <= 3.0 * se, || {
            format!("k = {k}: {measured:.5} vs {p:.5} (3 SE = {:.5})", 3.0 * se)
        })?;
    }

    // Nested batches through a calibrated model, independent and correlated.
    let d = 32;
    let model = init_weights(&BlockConfig::swiglu(d, 128, 2), 702).map_err(|e| e.to_string())?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 128,
        scale: 1.0,
    };
    let calib = gaussian_stream(&sc, d, 703).map_err(|e| e.to_string())?;
    let specs = calibrate_sequential(
        &model,
        &calib,
        SiteTargets::uniform(0.6),
        ModeEstimator::Mean,
        CenteringPolicy::default(),
        &CalibrationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let sizes = [1, 2, 4, 8, 16];
    let mut curves = Vec::new();
    for rho in [0.0, 0.8] {
        for hook in [HookPoint::up_gate(0), HookPoint::down(1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(704);
            let c = overlap_curve(&model, &specs, hook, |k| correlated_batch(k, d, rho, &mut rng), &sizes, 48)
                .map_err(|e| e.to_string())?;
            ensure(c.overlap_sparsity.windows(2).all(|w| w[1] <= w[0]), || {
                format!("not non-increasing: {c:?}")
            })?;
            curves.push(c);
        }
    }
    for (ind, cor) in curves[..2].iter().zip(&curves[2..]) {
        let pairs = ind.overlap_sparsity.iter().zip(&cor.overlap_sparsity);
        for (&k, (&i_o, &c_o)) in sizes.iter().zip(pairs).skip(1) {
            ensure(c_o > i_o, || format!("{} k = {k}: correlated {c_o:.4} <= independent {i_o:.4}", ind.hook))?;
        }
    }
    Ok(format!(
        "Bernoulli s^k within 3 SE for k <= 8; at k = 16 independent {:.4}, correlated {:.4}",
        curves[0].overlap_sparsity[4], curves[2].overlap_sparsity[4]
    ))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(801);
    let mut worst = 0.0f64;
    for t in 0..50 {
        let d = rng.random_range(1..=64);
        let h = rng.random_range(1..=256);
        let batch = rng.random_range(1..=8);
        let w = swiglu_weights(d, h, &mut rng)?;
        let x = normal_matrix(batch, d, 1.0, &mut rng);
        let oracle = swiglu_oracle(&x, &w);
        let (dense, _) = dense_swiglu(&x, &w).map_err(|e| e.to_string())?;
        let (cats, _) = cats_swiglu(0.0, &x, &w).map_err(|e| e.to_string())?;
        let (scap, _) = scap_swiglu(0.0, 0.0, &x, &w, 0.0, 0.0).map_err(|e| e.to_string())?;
        for (name, y) in [("dense", &dense), ("cats", &cats), ("scap", &scap)] {
            let err = max_diff(y, &oracle);
            worst = worst.max(err);
            ensure(err <= 1e-5, || format!("config {t} ({d}x{h}, batch {batch}) {name}: {err:.3e}"))?;
        }
        let pair = dense.max_abs_diff(&cats).map_err(|e| e.to_string())?.max(
            dense.max_abs_diff(&scap).map_err(|e| e.to_string())?,
        );
        ensure(pair <= 1e-5, || format!("config {t}: schemes differ by {pair:.3e}"))?;
    }
    Ok(format!("50 configs, max deviation from f64 oracle {worst:.2e}"))
}

fn read_dir_sorted(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("dir entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("file"))
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let small = ["--d-model", "16", "--d-hidden", "32", "--blocks", "2", "--sequences", "4", "--seq-len", "64", "--seed", "9"];
    let commands: [&[&str]; 6] = [
        &["calibrate"],
        &["sweep", "--grid-up-gate", "0.2,0.4", "--grid-down", "0.5,0.7"],
        &["bench", "--batch", "16"],
        &["overlap", "--trials", "8", "--rho", "0.5"],
        &["ablate-mode", "--ffn", "gelu", "--sparsity-grid", "0.2,0.5,0.8"],
        &["roundtrip-check"],
    ];
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for args in commands {
        let mut runs = Vec::new();
        for run in 0..2 {
            let out = root.path().join(format!("{}-{run}", args[0]));
            let o = Command::new(env!("CARGO_BIN_EXE_scap"))
                .args(args)
                .args(small)
                .arg("--out")
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(o.status.success(), || {
                format!("{}: {}", args[0], String::from_utf8_lossy(&o.stderr).trim())
            })?;
            runs.push(read_dir_sorted(&out));
        }
        ensure(runs[0].len() >= 2, || format!("{} wrote {} files", args[0], runs[0].len()))?;
        ensure(runs[0] == runs[1], || format!("{} output differs between runs", args[0]))?;
        files += runs[0].len();
    }

    // container round trip on both block kinds
    for (i, config) in [BlockConfig::swiglu(24, 40, 3), BlockConfig::gelu(24, 40, 3, 0.7)].iter().enumerate() {
        let model = init_weights(config, 900 + i as u64).map_err(|e| e.to_string())?;
        let path = root.path().join(format!("m{i}.scap"));
        save_model(&model, &path).map_err(|e| e.to_string())?;
        let loaded = load_model(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure(encode_model(&loaded).map_err(|e| e.to_string())? == bytes, || "re-encoding differs".into())?;
        let blob = |m: &scap::model::Model| -> Vec<u32> {
            let enc = encode_model(m).expect("encodes");
            let (_, blob) = scap::io::split_container(&enc).expect("splits");
            blob.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        };
        ensure(blob(&model) == blob(&loaded), || "tensor bits differ".into())?;
        ensure(decode_model(&bytes).map_err(|e| e.to_string())? == model, || "decoded model differs".into())?;
    }
    Ok(format!("6 subcommands x 2 runs, {files} files identical; containers bitwise exact"))
}

fn criterion_10() -> Outcome {
    let model = init_weights(&BlockConfig::swiglu(32, 128, 2), 1001).map_err(|e| e.to_string())?;
    let sc = StreamConfig {
        n_sequences: 8,
        seq_len: 128,
        scale: 1.0,
    };
    let calib = gaussian_stream(&sc, 32, 1002).map_err(|e| e.to_string())?;
    let eval = gaussian_stream(&sc, 32, 1003).map_err(|e| e.to_string())?;
    let up = [0.2, 0.3, 0.4, 0.5, 0.6];
    let down = [0.4, 0.5, 0.6, 0.7, 0.8];
    let r = pareto_sweep(&model, &calib, &eval, &up, &down, &SweepOptions::default()).map_err(|e| e.to_string())?;
    let pts: Vec<(f64, f64)> = r.entries.iter().map(|e| (e.report.ffn_sparsity, -e.error)).collect();
    for &a in &r.dominant {
        for &b in &r.dominant {
            ensure(!dominates(pts[a], pts[b]), || format!("front entry {a} dominates {b}"))?;
        }
    }
    for i in 0..pts.len() {
        let on_front = r.dominant.contains(&i);
        let dominated = (0..pts.len()).any(|j| dominates(pts[j], pts[i]));
        ensure(on_front != dominated, || format!("entry {i}: front {on_front}, dominated {dominated}"))?;
    }
    for i in 0..up.len() {
        for j in 0..down.len() {
            let e = r.entry(i, j).error;
            if i > 0 {
                let prev = r.entry(i - 1, j).error;
                ensure(prev <= e, || format!("up/gate {} -> {}: {prev:.5} > {e:.5}", up[i - 1], up[i]))?;
            }
            if j > 0 {
                let prev = r.entry(i, j - 1).error;
                ensure(prev <= e, || format!("down {} -> {}: {prev:.5} > {e:.5}", down[j - 1], down[j]))?;
            }
        }
    }
    Ok(format!("25 points, {} on the front, error monotone on both axes", r.dominant.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("mode-centering functional equivalence", criterion_1),
        ("quantile / pruner consistency", criterion_2),
        ("target vs observed sparsity", criterion_3),
        ("FFN sparsity accounting", criterion_4),
        ("MAC proportionality", criterion_5),
        ("mode-centering sparsity gain", criterion_6),
        ("overlap decay", criterion_7),
        ("scheme equivalence", criterion_8),
        ("determinism and persistence", criterion_9),
        ("Pareto sweep sanity", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
