//! Toy feed-forward stacks used as the calibration and evaluation substrate.
//!
//! Each block is either a SwiGLU or a GELU MLP, optionally preceded by a
//! parameter-free RMSNorm and wrapped in a residual connection. There is no
//! attention: the residual stream passes straight from block to block.
//! Two hook points per block expose the FC inputs that get pruned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gelu_mlp_sites, swiglu_sites, BlockTrace, GeluMlpWeights, OpCount, SwiGluWeights};
use crate::prune::{Cut, Mask, PruneSpec};
use crate::tensor::{rms_norm, DenseMatrix, DenseVector};

const RMS_EPS: f32 = 1e-6;

/// Extra factor on the GELU-MLP Up weights. At unit pre-activation spread
/// the GELU minimum's density spike competes with the offset bulk for the
/// peak; 0.8 keeps the peak on the positive side.
const GELU_UP_GAIN: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    SwiGlu,
    GeluMlp,
}

impl fmt::Display for FfnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FfnKind::SwiGlu => "swiglu",
            FfnKind::GeluMlp => "gelu",
        })
    }
}

/// Shape and wiring of a toy stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub ffn_kind: FfnKind,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_blocks: usize,
    pub residual: bool,
    pub rmsnorm: bool,
    /// Constant added to every GELU-MLP Up bias; pushes the GELU output
    /// distribution's peak away from zero. Ignored for SwiGLU.
    #[serde(default)]
    pub up_bias_offset: f32,
}

impl BlockConfig {
    pub fn swiglu(d_model: usize, d_hidden: usize, n_blocks: usize) -> Self {
        Self {
            ffn_kind: FfnKind::SwiGlu,
            d_model,
            d_hidden,
            n_blocks,
            residual: true,
            rmsnorm: true,
            up_bias_offset: 0.0,
        }
    }

    pub fn gelu(d_model: usize, d_hidden: usize, n_blocks: usize, up_bias_offset: f32) -> Self {
        Self {
            ffn_kind: FfnKind::GeluMlp,
            d_model,
            d_hidden,
            n_blocks,
            residual: true,
            rmsnorm: false,
            up_bias_offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_hidden == 0 || self.n_blocks == 0 {
            return Err(Error::Config(format!(
                "d_model, d_hidden and n_blocks must be >= 1 (got {}, {}, {})",
                self.d_model, self.d_hidden, self.n_blocks
            )));
        }
        if !self.up_bias_offset.is_finite() {
            return Err(Error::Config("up_bias_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Which FC input of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    /// Input shared by Up and Gate (or Up alone in a GELU MLP).
    UpGateInput,
    /// Input of the Down projection.
    DownInput,
}

impl HookSite {
    pub fn as_str(&self) -> &'static str {
        match self {
            HookSite::UpGateInput => "up_gate_input",
            HookSite::DownInput => "down_input",
        }
    }
}

/// A hook site in a specific block. Orders by block, then site, which is
/// also forward-execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub block: usize,
    pub site: HookSite,
}

impl HookPoint {
    pub fn new(block: usize, site: HookSite) -> Self {
        Self { block, site }
    }

    pub fn up_gate(block: usize) -> Self {
        Self::new(block, HookSite::UpGateInput)
    }

    pub fn down(block: usize) -> Self {
        Self::new(block, HookSite::DownInput)
    }

    /// `blocks.<i>.<site>`
    pub fn layer_id(&self) -> String {
        format!("blocks.{}.{}", self.block, self.site.as_str())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidHook(format!("cannot parse hook `{s}`"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (idx, site) = rest.split_once('.').ok_or_else(bad)?;
        let block = idx.parse().map_err(|_| bad())?;
        let site = match site {
            "up_gate_input" => HookSite::UpGateInput,
            "down_input" => HookSite::DownInput,
            _ => return Err(bad()),
        };
        Ok(Self { block, site })
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.layer_id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    SwiGlu(SwiGluWeights),
    GeluMlp(GeluMlpWeights),
}

impl Block {
    fn dense_macs(&self, batch: usize) -> u64 {
        match self {
            Block::SwiGlu(w) => w.dense_macs(batch),
            Block::GeluMlp(w) => w.dense_macs(batch),
        }
    }

    fn run(&self, x: &DenseMatrix, up: Option<Cut>, down: Option<Cut>, capture: bool) -> BlockTrace {
        match self {
            Block::SwiGlu(w) => swiglu_sites(x, w, up, down, capture),
            Block::GeluMlp(w) => gelu_mlp_sites(x, w, up, down, capture),
        }
    }
}

/// Immutable dense stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: BlockConfig,
    blocks: Vec<Block>,
}

/// Deterministic pseudo-random weights scaled by `1/sqrt(fan_in)`.
pub fn init_weights(config: &BlockConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (config.d_model, config.d_hidden);
    let s_d = 1.0 / (d as f32).sqrt();
    let s_h = 1.0 / (h as f32).sqrt();
    let blocks = (0..config.n_blocks)
        .map(|_| match config.ffn_kind {
            FfnKind::SwiGlu => {
                let g = DenseMatrix::random_normal(d, h, s_d, &mut rng);
                let u = DenseMatrix::random_normal(d, h, s_d, &mut rng);
                let dn = DenseMatrix::random_normal(h, d, s_h, &mut rng);
                SwiGluWeights::new(g, u, dn).map(Block::SwiGlu)
            }
            FfnKind::GeluMlp => {
                let u = DenseMatrix::random_normal(d, h, GELU_UP_GAIN * s_d, &mut rng);
                let dn = DenseMatrix::random_normal(h, d, s_h, &mut rng);
                GeluMlpWeights::new(
                    u,
                    DenseVector::filled(h, config.up_bias_offset),
                    dn,
                    DenseVector::zeros(d),
                )
                .map(Block::GeluMlp)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: config.clone(),
        blocks,
    })
}

/// Per-hook pruning outcome of one forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HookCount {
    pub pruned: usize,
    pub total: usize,
}

impl HookCount {
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pruned as f64 / self.total as f64
        }
    }
}

/// Everything an instrumented forward reports.
#[derive(Debug, Clone)]
pub struct SparseForward {
    pub output: DenseMatrix,
    pub ops: OpCount,
    pub dense_macs: u64,
    /// Pruning counts at every hook point (dense sites report zero pruned).
    pub counts: BTreeMap<HookPoint, HookCount>,
    /// Kept-position masks, when requested.
    pub masks: BTreeMap<HookPoint, Mask>,
    /// Activations arriving at each hook before shift and pruning, when requested.
    pub inputs: BTreeMap<HookPoint, DenseMatrix>,
}

impl Model {
    /// Assembles a model from existing blocks; every block must match `config`.
    pub fn from_blocks(config: BlockConfig, blocks: Vec<Block>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.n_blocks {
            return Err(Error::Shape(format!(
                "{} blocks for n_blocks = {}",
                blocks.len(),
                config.n_blocks
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let (kind, d, h, o) = match b {
                Block::SwiGlu(w) => (FfnKind::SwiGlu, w.d_model(), w.d_hidden(), w.d_out()),
                Block::GeluMlp(w) => (FfnKind::GeluMlp, w.d_model(), w.d_hidden(), w.d_out()),
            };
            if kind != config.ffn_kind || d != config.d_model || h != config.d_hidden || o != config.d_model {
                return Err(Error::Shape(format!("block {i} does not match the config")));
            }
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Every hook point in execution order.
    pub fn hook_points(&self) -> Vec<HookPoint> {
        (0..self.blocks.len())
            .flat_map(|b| [HookPoint::up_gate(b), HookPoint::down(b)])
            .collect()
    }

    pub fn check_hook(&self, hook: &HookPoint) -> Result<()> {
        if hook.block >= self.blocks.len() {
            return Err(Error::InvalidHook(format!(
                "{hook}: model has {} blocks",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    pub fn dense_macs(&self, batch: usize) -> u64 {
        self.blocks.iter().map(|b| b.dense_macs(batch)).sum()
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_with_hooks(x, &BTreeSet::new())?.0)
    }

    /// Dense forward that also returns the activations flowing through `hooks`.
    pub fn forward_with_hooks(
        &self,
        x: &DenseMatrix,
        hooks: &BTreeSet<HookPoint>,
    ) -> Result<(DenseMatrix, BTreeMap<HookPoint, DenseMatrix>)> {
        for h in hooks {
            self.check_hook(h)?;
        }
        let run = self.run(x, &BTreeMap::new(), hooks, false)?;
        Ok((run.output, run.inputs))
    }

    /// Wraps the model with pruning specs; unspecified hook points stay dense.
    pub fn apply_prune_specs(&self, specs: BTreeMap<HookPoint, PruneSpec>) -> Result<SparseModel<'_>> {
        for (h, s) in &specs {
            self.check_hook(h)?;
            s.validate()?;
        }
        Ok(SparseModel { model: self, specs })
    }

    fn run(
        &self,
        x: &DenseMatrix,
        specs: &BTreeMap<HookPoint, PruneSpec>,
        capture: &BTreeSet<HookPoint>,
        masks: bool,
    ) -> Result<SparseForward> {
        self.check_input(x)?;
        let cut = |h: HookPoint| specs.get(&h).map(|s| Cut { tau: s.tau, eta: s.eta });
        let mut stream = x.clone();
        let mut out = SparseForward {
            output: DenseMatrix::zeros(0, 0),
            ops: OpCount::default(),
            dense_macs: 0,
            counts: BTreeMap::new(),
            masks: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let (hu, hd) = (HookPoint::up_gate(i), HookPoint::down(i));
            let block_in = self.block_input(&stream);
            let want_down = capture.contains(&hd);
            let t = block.run(&block_in, cut(hu), cut(hd), masks || want_down);
            if capture.contains(&hu) {
                out.inputs.insert(hu, block_in);
            }
            out.ops += t.ops;
            out.dense_macs += block.dense_macs(x.rows());
            out.counts.insert(hu, HookCount { pruned: t.up_gate.0, total: t.up_gate.1 });
            out.counts.insert(hd, HookCount { pruned: t.down.0, total: t.down.1 });
            if masks {
                if let Some(m) = t.up_gate_mask {
                    out.masks.insert(hu, m);
                }
                if let Some(m) = t.down_mask {
                    out.masks.insert(hd, m);
                }
            }
            if want_down {
                if let Some(d) = t.down_input {
                    out.inputs.insert(hd, d);
                }
            }
            stream = self.block_output(stream, t.output)?;
        }
        out.output = stream;
        Ok(out)
    }

    /// What block FFNs see of the residual stream.
    pub(crate) fn block_input(&self, stream: &DenseMatrix) -> DenseMatrix {
        if self.config.rmsnorm {
            rms_norm(stream, RMS_EPS)
        } else {
            stream.clone()
        }
    }

    pub(crate) fn block_output(&self, stream: DenseMatrix, ffn_out: DenseMatrix) -> Result<DenseMatrix> {
        if self.config.residual {
            stream.add(&ffn_out)
        } else {
            Ok(ffn_out)
        }
    }

    /// Runs block `i` on its (already normalized) input.
    pub(crate) fn run_block(
        &self,
        i: usize,
        block_in: &DenseMatrix,
        up: Option<Cut>,
        down: Option<Cut>,
        capture: bool,
    ) -> BlockTrace {
        self.blocks[i].run(block_in, up, down, capture)
    }
}

/// A model routed through the sparse kernels at the specified hook points.
#[derive(Debug, Clone)]
pub struct SparseModel<'m> {
    model: &'m Model,
    specs: BTreeMap<HookPoint, PruneSpec>,
}

impl<'m> SparseModel<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn specs(&self) -> &BTreeMap<HookPoint, PruneSpec> {
        &self.specs
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_traced(x, false)?.output)
    }

    /// Forward with op counts and per-hook pruning counts; `masks` also
    /// returns the kept-position mask at every hook.
    pub fn forward_traced(&self, x: &DenseMatrix, masks: bool) -> Result<SparseForward> {
        self.model.run(x, &self.specs, &BTreeSet::new(), masks)
    }

    /// Forward that captures the pre-pruning activations at `hooks`.
    pub fn forward_capturing(&self, x: &DenseMatrix, hooks: &BTreeSet<HookPoint>) -> Result<SparseForward> {
        for h in hooks {
            self.model.check_hook(h)?;
        }
        self.model.run(x, &self.specs, hooks, false)
    }
}
