//! Batch command-line front end.
//!
//! Each subcommand resolves a [`RunConfig`] (flags over config file over
//! built-in defaults), runs one analysis and writes CSV plus a JSON report
//! into the output directory. Reports embed the effective config.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    mac_bench, mode_centering_ablation, overlap_curve, pareto_sweep, AblationOptions, SweepOptions,
};
use crate::calib::{
    calibrate_sequential, collect_stats, CalibrationConfig, CalibrationReport, CenteringPolicy, Grouping,
    ModeEstimator, SiteTargets, DEFAULT_RESERVOIR_CAPACITY,
};
use crate::data::{correlated_batch, gaussian_stream, StreamConfig};
use crate::error::{Error, Result};
use crate::io::{decode_report, encode_model, encode_report, load_model, save_model, Report, ReportData, ReportKind};
use crate::model::{init_weights, Block, BlockConfig, FfnKind, HookPoint, Model};
use crate::tensor::DenseMatrix;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SCAP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "scap", version, about = "Calibrated activation pruning for feed-forward blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Collect activation statistics and report thresholds and mode estimates.
    Calibrate(CalibrateArgs),
    /// Calibrate a grid of (up/gate, down) targets and mark the Pareto front.
    Sweep(SweepArgs),
    /// Count MACs of dense, CATS and SCAP SwiGLU kernels across sparsities.
    Bench(BenchArgs),
    /// Measure how the shared pruned-channel fraction decays with batch size.
    Overlap(OverlapArgs),
    /// Compare Down-input pruning of a GELU stack with and without a mode shift.
    AblateMode(AblateArgs),
    /// Write the model to a weight container, read it back and compare.
    RoundtripCheck(RoundtripArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Calibrate,
    Sweep,
    Bench,
    Overlap,
    AblateMode,
    RoundtripCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FfnChoice {
    Swiglu,
    Gelu,
}

impl From<FfnChoice> for FfnKind {
    fn from(c: FfnChoice) -> Self {
        match c {
            FfnChoice::Swiglu => FfnKind::SwiGlu,
            FfnChoice::Gelu => FfnKind::GeluMlp,
        }
    }
}

impl From<FfnKind> for FfnChoice {
    fn from(k: FfnKind) -> Self {
        match k {
            FfnKind::SwiGlu => FfnChoice::Swiglu,
            FfnKind::GeluMlp => FfnChoice::Gelu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Mean,
    Median,
    Kde,
}

impl From<EstimatorChoice> for ModeEstimator {
    fn from(c: EstimatorChoice) -> Self {
        match c {
            EstimatorChoice::Mean => ModeEstimator::Mean,
            EstimatorChoice::Median => ModeEstimator::Median,
            EstimatorChoice::Kde => ModeEstimator::kde(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CenteringChoice {
    /// Shift only the Down input of GELU blocks.
    Auto,
    All,
    None,
}

impl From<CenteringChoice> for CenteringPolicy {
    fn from(c: CenteringChoice) -> Self {
        match c {
            CenteringChoice::Auto => CenteringPolicy::NonGluDownOnly,
            CenteringChoice::All => CenteringPolicy::All,
            CenteringChoice::None => CenteringPolicy::None,
        }
    }
}

/// Flags every subcommand accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Base seed for weights, data streams and reservoirs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with config keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub ffn: Option<FfnChoice>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorChoice>,
    #[arg(long, value_enum)]
    pub centering: Option<CenteringChoice>,
    /// Constant added to GELU Up biases.
    #[arg(long, allow_hyphen_values = true)]
    pub up_bias_offset: Option<f32>,
    /// Sequences in the calibration and evaluation streams.
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Vectors per sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Standard deviation of the synthetic input stream.
    #[arg(long)]
    pub input_scale: Option<f32>,
    #[arg(long)]
    pub reservoir_capacity: Option<usize>,
    /// Load weights from a container instead of initializing them.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Target sparsities for the threshold table, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sparsity_grid: Option<Vec<f64>>,
    /// Target of the prune specs at Up/Gate inputs.
    #[arg(long)]
    pub target_up_gate: Option<f64>,
    /// Target of the prune specs at Down inputs.
    #[arg(long)]
    pub target_down: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub grid_up_gate: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_down: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Target FFN sparsities.
    #[arg(long, value_delimiter = ',')]
    pub bench_targets: Option<Vec<f64>>,
    /// Rows in the measured batch.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OverlapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// Correlation between vectors of one batch.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Hook to measure, e.g. `blocks.0.up_gate_input`.
    #[arg(long)]
    pub hook: Option<String>,
    /// Per-vector target sparsity at every hook.
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub sparsity_grid: Option<Vec<f64>>,
    /// Relative output error at which achievable sparsity is compared.
    #[arg(long)]
    pub error_budget: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RoundtripArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Calibrate(_) => CommandKind::Calibrate,
            Command::Sweep(_) => CommandKind::Sweep,
            Command::Bench(_) => CommandKind::Bench,
            Command::Overlap(_) => CommandKind::Overlap,
            Command::AblateMode(_) => CommandKind::AblateMode,
            Command::RoundtripCheck(_) => CommandKind::RoundtripCheck,
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Calibrate(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Bench(a) => &a.common,
            Command::Overlap(a) => &a.common,
            Command::AblateMode(a) => &a.common,
            Command::RoundtripCheck(a) => &a.common,
        }
    }
}

/// Fully resolved settings of one invocation. Keys double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub out: PathBuf,
    pub seed: u64,
    pub ffn: FfnChoice,
    pub d_model: usize,
    pub d_hidden: usize,
    pub blocks: usize,
    pub up_bias_offset: f32,
    pub estimator: EstimatorChoice,
    pub centering: CenteringChoice,
    pub sequences: usize,
    pub seq_len: usize,
    pub input_scale: f32,
    pub reservoir_capacity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub sparsity_grid: Vec<f64>,
    pub target_up_gate: f64,
    pub target_down: f64,
    pub grid_up_gate: Vec<f64>,
    pub grid_down: Vec<f64>,
    pub bench_targets: Vec<f64>,
    pub batch: usize,
    pub batch_sizes: Vec<usize>,
    pub rho: f64,
    pub trials: usize,
    pub hook: String,
    pub target: f64,
    pub error_budget: f64,
}

fn tenths(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(|i| f64::from(i) / 10.0).collect()
}

impl RunConfig {
    /// Built-in defaults. Sweeps and the ablation use shorter streams since
    /// they calibrate once per grid point; the ablation runs on a single
    /// shifted GELU block.
    pub fn defaults(command: CommandKind) -> Self {
        let mut c = RunConfig {
            command,
            out: PathBuf::from("scap-out"),
            seed: 20_240_601,
            ffn: FfnChoice::Swiglu,
            d_model: 32,
            d_hidden: 128,
            blocks: 4,
            up_bias_offset: 1.2,
            estimator: EstimatorChoice::Mean,
            centering: CenteringChoice::Auto,
            sequences: 64,
            seq_len: 256,
            input_scale: 1.0,
            reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY,
            model: None,
            sparsity_grid: tenths(1, 9),
            target_up_gate: 0.4,
            target_down: 0.6,
            grid_up_gate: tenths(2, 6),
            grid_down: tenths(4, 8),
            bench_targets: tenths(1, 6),
            batch: 64,
            batch_sizes: vec![1, 2, 4, 8, 16, 32],
            rho: 0.5,
            trials: 64,
            hook: "blocks.0.up_gate_input".into(),
            target: 0.5,
            error_budget: 0.05,
        };
        match command {
            CommandKind::Sweep => {
                c.sequences = 16;
                c.seq_len = 128;
            }
            CommandKind::AblateMode => {
                c.ffn = FfnChoice::Gelu;
                c.blocks = 1;
                c.estimator = EstimatorChoice::Kde;
                c.input_scale = 0.25;
                c.sequences = 16;
                c.seq_len = 128;
            }
            _ => {}
        }
        c
    }

    /// Defaults, then the config file named by `--config`, then flags.
    pub fn resolve(command: &Command) -> Result<Self> {
        let mut cfg = Self::defaults(command.kind());
        let common = command.common();
        if let Some(path) = &common.config {
            cfg = cfg.merge_file(path)?;
        }
        cfg.apply_common(common);
        match command {
            Command::Calibrate(a) => {
                set(&mut cfg.sparsity_grid, &a.sparsity_grid);
                set(&mut cfg.target_up_gate, &a.target_up_gate);
                set(&mut cfg.target_down, &a.target_down);
            }
            Command::Sweep(a) => {
                set(&mut cfg.grid_up_gate, &a.grid_up_gate);
                set(&mut cfg.grid_down, &a.grid_down);
            }
            Command::Bench(a) => {
                set(&mut cfg.bench_targets, &a.bench_targets);
                set(&mut cfg.batch, &a.batch);
            }
            Command::Overlap(a) => {
                set(&mut cfg.batch_sizes, &a.batch_sizes);
                set(&mut cfg.rho, &a.rho);
                set(&mut cfg.trials, &a.trials);
                set(&mut cfg.hook, &a.hook);
                set(&mut cfg.target, &a.target);
            }
            Command::AblateMode(a) => {
                set(&mut cfg.sparsity_grid, &a.sparsity_grid);
                set(&mut cfg.error_budget, &a.error_budget);
            }
            Command::RoundtripCheck(_) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn merge_file(self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if file.contains_key("command") {
            return Err(Error::Config(format!("{}: `command` cannot be set from a file", path.display())));
        }
        let mut table = toml::Table::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(file);
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    fn apply_common(&mut self, a: &CommonArgs) {
        set(&mut self.seed, &a.seed);
        set(&mut self.out, &a.out);
        set(&mut self.d_model, &a.d_model);
        set(&mut self.d_hidden, &a.d_hidden);
        set(&mut self.blocks, &a.blocks);
        set(&mut self.ffn, &a.ffn);
        set(&mut self.estimator, &a.estimator);
        set(&mut self.centering, &a.centering);
        set(&mut self.up_bias_offset, &a.up_bias_offset);
        set(&mut self.sequences, &a.sequences);
        set(&mut self.seq_len, &a.seq_len);
        set(&mut self.input_scale, &a.input_scale);
        set(&mut self.reservoir_capacity, &a.reservoir_capacity);
        if a.model.is_some() {
            self.model.clone_from(&a.model);
        }
    }

    /// Checks values and input paths. Runs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("blocks", self.blocks),
            ("sequences", self.sequences),
            ("seq_len", self.seq_len),
            ("reservoir_capacity", self.reservoir_capacity),
            ("batch", self.batch),
            ("trials", self.trials),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Config(format!("input_scale must be positive, got {}", self.input_scale)));
        }
        if !self.up_bias_offset.is_finite() {
            return Err(Error::Config("up_bias_offset must be finite".into()));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} value {v} outside [0, 1]")))
            }
        };
        let grid = |name: &str, g: &[f64]| -> Result<()> {
            if g.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be strictly ascending")));
            }
            g.iter().try_for_each(|&v| unit(name, v))
        };
        grid("sparsity_grid", &self.sparsity_grid)?;
        grid("grid_up_gate", &self.grid_up_gate)?;
        grid("grid_down", &self.grid_down)?;
        grid("bench_targets", &self.bench_targets)?;
        unit("target_up_gate", self.target_up_gate)?;
        unit("target_down", self.target_down)?;
        unit("rho", self.rho)?;
        unit("target", self.target)?;
        if self.batch_sizes.is_empty() || self.batch_sizes[0] == 0 || self.batch_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("batch_sizes must be positive and strictly ascending".into()));
        }
        if !(self.error_budget > 0.0 && self.error_budget.is_finite()) {
            return Err(Error::Config(format!("error_budget must be positive, got {}", self.error_budget)));
        }
        let hook = HookPoint::parse(&self.hook).map_err(|e| Error::Config(e.to_string()))?;
        if self.model.is_none() && hook.block >= self.blocks {
            return Err(Error::Config(format!("hook {} but the model has {} blocks", self.hook, self.blocks)));
        }
        if self.command == CommandKind::AblateMode && self.model.is_none() && self.ffn != FfnChoice::Gelu {
            return Err(Error::Config("ablate-mode needs --ffn gelu".into()));
        }
        if let Some(p) = &self.model {
            if !p.is_file() {
                return Err(Error::Config(format!("model file {} does not exist", p.display())));
            }
        }
        if self.out.is_file() {
            return Err(Error::Config(format!("output path {} is a file", self.out.display())));
        }
        Ok(())
    }

    /// The config as echoed into reports: everything except the output
    /// location, so identical runs into different directories match.
    pub fn echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        Ok(v)
    }

    pub fn block_config(&self) -> BlockConfig {
        match self.ffn {
            FfnChoice::Swiglu => BlockConfig::swiglu(self.d_model, self.d_hidden, self.blocks),
            FfnChoice::Gelu => BlockConfig::gelu(self.d_model, self.d_hidden, self.blocks, self.up_bias_offset),
        }
    }

    fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            n_sequences: self.sequences,
            seq_len: self.seq_len,
            scale: self.input_scale,
        }
    }

    fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            reservoir_capacity: self.reservoir_capacity,
            seed: self.seed,
            grouping: Grouping::PerHook,
        }
    }

    fn targets(&self) -> SiteTargets {
        SiteTargets::new(self.target_up_gate, self.target_down)
    }
}

fn set<T: Clone>(dst: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *dst = v.clone();
    }
}

// Seed offsets keep the derived streams independent of each other.
const CALIB_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

/// Loads `--model`, or initializes weights from the config. A loaded
/// model's shape overrides the shape keys so the echo stays truthful.
fn build_model(cfg: &mut RunConfig) -> Result<Model> {
    match &cfg.model {
        Some(path) => {
            let model = load_model(path)?;
            let bc = model.config();
            cfg.ffn = bc.ffn_kind.into();
            cfg.d_model = bc.d_model;
            cfg.d_hidden = bc.d_hidden;
            cfg.blocks = bc.n_blocks;
            cfg.up_bias_offset = bc.up_bias_offset;
            model.check_hook(&HookPoint::parse(&cfg.hook)?)?;
            Ok(model)
        }
        None => init_weights(&cfg.block_config(), cfg.seed),
    }
}

fn streams(cfg: &RunConfig) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)> {
    let sc = cfg.stream_config();
    Ok((
        gaussian_stream(&sc, cfg.d_model, cfg.seed.wrapping_add(CALIB_STREAM))?,
        gaussian_stream(&sc, cfg.d_model, cfg.seed.wrapping_add(EVAL_STREAM))?,
    ))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the report, reads it back and validates it.
fn write_report<T: ReportData>(cfg: &RunConfig, name: &str, data: T) -> Result<PathBuf> {
    let path = cfg.out.join(name);
    let report = Report {
        version: crate::io::REPORT_VERSION.into(),
        kind: T::KIND,
        config: cfg.echo()?,
        data,
    };
    write_file(&path, &encode_report(&report)?)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_report::<T>(&bytes)?;
    Ok(path)
}

fn write_csv(cfg: &RunConfig, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
    let path = cfg.out.join(name);
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write_file(&path, &buf)?;
    Ok(path)
}

/// Threshold table per hook and target, prune specs at the configured
/// targets, and all three mode estimates per hook.
pub fn cmd_calibrate(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let (calib, _) = streams(&cfg)?;
    let hooks: BTreeSet<HookPoint> = model.hook_points().into_iter().collect();
    let stats = collect_stats(&model, &calib, &hooks, &cfg.calibration())?;
    let layers = stats
        .values()
        .map(|s| s.summarize(&cfg.sparsity_grid, ModeEstimator::kde()))
        .collect::<Result<Vec<_>>>()?;
    let specs = calibrate_sequential(
        &model,
        &calib,
        cfg.targets(),
        cfg.estimator.into(),
        cfg.centering.into(),
        &cfg.calibration(),
    )?;
    let report = CalibrationReport {
        layers,
        prune_specs: specs.into_values().collect(),
    };
    let csv = write_csv(&cfg, "calibration.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["layer_id", "target", "tau", "eta_mean", "eta_median", "eta_kde"])?;
        for l in &report.layers {
            for (s, tau) in &l.tau_by_sparsity {
                w.write_record([
                    l.layer_id.clone(),
                    s.clone(),
                    format!("{tau:.6e}"),
                    format!("{:.6e}", l.eta.mean),
                    format!("{:.6e}", l.eta.median),
                    format!("{:.6e}", l.eta.kde),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("calibration.csv", e))
    })?;
    Ok(vec![write_report(&cfg, "calibration.json", report)?, csv])
}

pub fn cmd_sweep(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let (calib, eval) = streams(&cfg)?;
    let options = SweepOptions {
        estimator: cfg.estimator.into(),
        centering: cfg.centering.into(),
        calibration: cfg.calibration(),
    };
    let result = pareto_sweep(&model, &calib, &eval, &cfg.grid_up_gate, &cfg.grid_down, &options)?;
    let csv = write_csv(&cfg, "sweep.csv", |buf| result.write_csv(buf))?;
    Ok(vec![write_report(&cfg, "sweep.json", result)?, csv])
}

/// Kernel op counts on Block 0's weights. Needs a SwiGLU model.
pub fn cmd_bench(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let w = match model.blocks().first() {
        Some(Block::SwiGlu(w)) => w,
        _ => return Err(Error::Config("bench measures SwiGLU kernels; use --ffn swiglu".into())),
    };
    let (calib, _) = streams(&cfg)?;
    let calib = DenseMatrix::vstack(&calib)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(EVAL_STREAM));
    let eval = DenseMatrix::random_normal(cfg.batch, cfg.d_model, cfg.input_scale, &mut rng);
    let table = mac_bench(w, &calib, &eval, &cfg.bench_targets)?;
    let csv = write_csv(&cfg, "bench.csv", |buf| table.write_csv(buf))?;
    Ok(vec![write_report(&cfg, "bench.json", table)?, csv])
}

/// Overlap at one hook on correlated batches, every hook pruned to `target`.
pub fn cmd_overlap(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let hook = HookPoint::parse(&cfg.hook)?;
    let (calib, _) = streams(&cfg)?;
    let specs = calibrate_sequential(
        &model,
        &calib,
        SiteTargets::uniform(cfg.target),
        cfg.estimator.into(),
        cfg.centering.into(),
        &cfg.calibration(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(BATCH_STREAM));
    let (d, rho, scale) = (cfg.d_model, cfg.rho, cfg.input_scale);
    let curve = overlap_curve(
        &model,
        &specs,
        hook,
        |k| Ok(correlated_batch(k, d, rho, &mut rng)?.map(|v| v * scale)),
        &cfg.batch_sizes,
        cfg.trials,
    )?;
    let csv = write_csv(&cfg, "overlap.csv", |buf| curve.write_csv(buf))?;
    Ok(vec![write_report(&cfg, "overlap.json", curve)?, csv])
}

pub fn cmd_ablate_mode(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let (calib, eval) = streams(&cfg)?;
    let options = AblationOptions {
        estimator: cfg.estimator.into(),
        error_budget: cfg.error_budget,
        calibration: cfg.calibration(),
    };
    let result = mode_centering_ablation(&model, &calib, &eval, &cfg.sparsity_grid, &options)?;
    let csv = write_csv(&cfg, "ablation.csv", |buf| result.write_csv(buf))?;
    Ok(vec![write_report(&cfg, "ablation.json", result)?, csv])
}

/// Outcome of a container write/read cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundtripSummary {
    pub tensors: usize,
    pub container_bytes: u64,
    /// Re-encoding the loaded model reproduces the file byte for byte.
    pub bitwise_equal: bool,
    /// Largest output difference on a probe batch.
    pub max_forward_diff: f32,
}

impl ReportData for RoundtripSummary {
    const KIND: ReportKind = ReportKind::Roundtrip;

    fn validate(&self) -> Result<()> {
        if !self.bitwise_equal || self.max_forward_diff != 0.0 {
            return Err(Error::Validation(format!(
                "round trip not exact: bitwise_equal = {}, max_forward_diff = {}",
                self.bitwise_equal, self.max_forward_diff
            )));
        }
        Ok(())
    }
}

pub fn cmd_roundtrip_check(mut cfg: RunConfig) -> Result<Vec<PathBuf>> {
    let model = build_model(&mut cfg)?;
    let path = cfg.out.join("model.scap");
    save_model(&model, &path)?;
    let written = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let loaded = load_model(&path)?;
    let again = encode_model(&loaded)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(EVAL_STREAM));
    let probe = DenseMatrix::random_normal(8, cfg.d_model, cfg.input_scale, &mut rng);
    let diff = model.forward(&probe)?.max_abs_diff(&loaded.forward(&probe)?)?;
    let tensors = crate::io::split_container(&written)?.0.tensors.len();
    let summary = RoundtripSummary {
        tensors,
        container_bytes: written.len() as u64,
        bitwise_equal: written == again && model == loaded,
        max_forward_diff: diff,
    };
    Ok(vec![path, write_report(&cfg, "roundtrip.json", summary)?])
}

fn dispatch(cfg: RunConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    match cfg.command {
        CommandKind::Calibrate => cmd_calibrate(cfg),
        CommandKind::Sweep => cmd_sweep(cfg),
        CommandKind::Bench => cmd_bench(cfg),
        CommandKind::Overlap => cmd_overlap(cfg),
        CommandKind::AblateMode => cmd_ablate_mode(cfg),
        CommandKind::RoundtripCheck => cmd_roundtrip_check(cfg),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

/// Resolves the config and runs the command, returning the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::resolve(&cli.command)?;
    match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("scap").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_differ_per_command() {
        let a = RunConfig::defaults(CommandKind::AblateMode);
        assert_eq!(a.ffn, FfnChoice::Gelu);
        assert_eq!(a.blocks, 1);
        let c = RunConfig::defaults(CommandKind::Calibrate);
        assert_eq!((c.sequences, c.seq_len), (64, 256));
        c.validate().unwrap();
        a.validate().unwrap();
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "d_model = 48\nd_hidden = 96\nsparsity_grid = [0.2, 0.4]\n").unwrap();
        let f = file.to_str().unwrap();
        let cli = parse(&["calibrate", "--config", f, "--d-model", "16"]);
        let cfg = RunConfig::resolve(&cli.command).unwrap();
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.d_hidden, 96);
        assert_eq!(cfg.sparsity_grid, vec![0.2, 0.4]);
        assert_eq!(cfg.blocks, 4);
    }

    #[test]
    fn unknown_file_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "d_modle = 48\n").unwrap();
        let cli = parse(&["sweep", "--config", file.to_str().unwrap()]);
        assert!(matches!(RunConfig::resolve(&cli.command), Err(Error::Config(_))));
    }

    #[test]
    fn grid_flags_parse_and_validate() {
        let cli = parse(&["calibrate", "--sparsity-grid", "0.3,0.5,0.7"]);
        assert_eq!(RunConfig::resolve(&cli.command).unwrap().sparsity_grid, vec![0.3, 0.5, 0.7]);
        for bad in ["0.5,0.3", "0.2,1.5", ""] {
            let cli = Cli::try_parse_from(["scap", "calibrate", "--sparsity-grid", bad]);
            if let Ok(cli) = cli {
                assert!(RunConfig::resolve(&cli.command).is_err(), "{bad}");
            }
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for args in [
            &["sweep", "--blocks", "0"][..],
            &["overlap", "--hook", "blocks.9.down_input"],
            &["overlap", "--hook", "nonsense"],
            &["overlap", "--batch-sizes", "4,2"],
            &["ablate-mode", "--ffn", "swiglu"],
            &["calibrate", "--model", "/nonexistent/model.scap"],
        ] {
            let cli = parse(args);
            assert!(RunConfig::resolve(&cli.command).is_err(), "{args:?}");
        }
    }

    #[test]
    fn echo_omits_output_dir() {
        let mut a = RunConfig::defaults(CommandKind::Bench);
        let mut b = a.clone();
        a.out = "x".into();
        b.out = "y".into();
        assert_eq!(a.echo().unwrap(), b.echo().unwrap());
        assert_eq!(a.echo().unwrap()["command"], "bench");
    }
}
