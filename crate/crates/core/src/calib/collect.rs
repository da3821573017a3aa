//! Running calibration passes over a model and turning the collected
//! statistics into prune specs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{LayerStats, ModeEstimator, DEFAULT_RESERVOIR_CAPACITY};
use crate::error::{Error, Result};
use crate::model::{FfnKind, HookPoint, HookSite, Model};
use crate::prune::{Cut, PruneSpec};
use crate::tensor::DenseMatrix;

/// How hook points share statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every hook point gets its own reservoir and threshold.
    #[default]
    PerHook,
    /// All blocks pool one reservoir per site kind, so they share `tau` and `eta`.
    PerSite,
}

/// Statistics key of `hook` under `grouping`.
pub fn group_key(hook: &HookPoint, grouping: Grouping) -> String {
    match grouping {
        Grouping::PerHook => hook.layer_id(),
        Grouping::PerSite => hook.site.as_str().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub reservoir_capacity: usize,
    pub seed: u64,
    pub grouping: Grouping,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY,
            seed: 0,
            grouping: Grouping::PerHook,
        }
    }
}

impl CalibrationConfig {
    fn validate(&self) -> Result<()> {
        if self.reservoir_capacity == 0 {
            return Err(Error::Config("reservoir_capacity must be >= 1".into()));
        }
        Ok(())
    }

    /// Reservoir seed for a statistics key: FNV-1a of the key mixed into the base seed.
    fn seed_for(&self, key: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^ self.seed
    }

    fn new_stats(&self, key: &str) -> LayerStats {
        LayerStats::new(key, self.reservoir_capacity, self.seed_for(key))
    }
}

/// Target sparsity for each site kind. A target of 0 leaves the site dense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteTargets {
    pub up_gate: f64,
    pub down: f64,
}

impl SiteTargets {
    pub fn new(up_gate: f64, down: f64) -> Self {
        Self { up_gate, down }
    }

    pub fn uniform(s: f64) -> Self {
        Self::new(s, s)
    }

    pub fn for_site(&self, site: HookSite) -> f64 {
        match site {
            HookSite::UpGateInput => self.up_gate,
            HookSite::DownInput => self.down,
        }
    }
}

/// Which sites get a mode shift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringPolicy {
    /// Only the Down input of GELU MLP blocks, where the activation peak
    /// sits away from zero.
    #[default]
    NonGluDownOnly,
    All,
    None,
}

impl CenteringPolicy {
    pub fn centers(&self, kind: FfnKind, site: HookSite) -> bool {
        match self {
            CenteringPolicy::NonGluDownOnly => kind == FfnKind::GeluMlp && site == HookSite::DownInput,
            CenteringPolicy::All => true,
            CenteringPolicy::None => false,
        }
    }
}

/// One dense pass over `stream`, feeding the activations at `hooks` into
/// per-group reservoirs.
pub fn collect_stats(
    model: &Model,
    stream: &[DenseMatrix],
    hooks: &BTreeSet<HookPoint>,
    config: &CalibrationConfig,
) -> Result<BTreeMap<String, LayerStats>> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::EmptyStream("calibration stream has no batches".into()));
    }
    for h in hooks {
        model.check_hook(h)?;
    }
    let mut stats: BTreeMap<String, LayerStats> = BTreeMap::new();
    for batch in stream {
        let (_, captured) = model.forward_with_hooks(batch, hooks)?;
        for (hook, t) in &captured {
            let key = group_key(hook, config.grouping);
            stats
                .entry(key.clone())
                .or_insert_with(|| config.new_stats(&key))
                .observe(t);
        }
    }
    Ok(stats)
}

fn spec_from_stats(
    stats: &LayerStats,
    hook: &HookPoint,
    target: f64,
    center: bool,
    estimator: ModeEstimator,
) -> Result<PruneSpec> {
    let (tau, eta) = if center {
        let eta = stats.estimate_mode(estimator)?;
        (stats.quantile_threshold_centered(target, eta)?, eta)
    } else {
        (stats.quantile_threshold(target)?, 0.0)
    };
    PruneSpec::new(hook.layer_id(), tau, eta, target)
}

/// Specs for every hook point with a non-zero target, from statistics
/// gathered by [`collect_stats`]. Centered sites use `Quantile(|X - eta|, s)`.
pub fn derive_specs(
    model: &Model,
    stats: &BTreeMap<String, LayerStats>,
    grouping: Grouping,
    targets: SiteTargets,
    estimator: ModeEstimator,
    centering: CenteringPolicy,
) -> Result<BTreeMap<HookPoint, PruneSpec>> {
    let kind = model.config().ffn_kind;
    let mut specs = BTreeMap::new();
    for hook in model.hook_points() {
        let target = targets.for_site(hook.site);
        if target == 0.0 {
            continue;
        }
        let key = group_key(&hook, grouping);
        let st = stats
            .get(&key)
            .ok_or_else(|| Error::Calibration(format!("no statistics for `{key}`")))?;
        let spec = spec_from_stats(st, &hook, target, centering.centers(kind, hook.site), estimator)?;
        specs.insert(hook, spec);
    }
    Ok(specs)
}

/// Calibrates hook points in forward order, with every upstream hook
/// already pruned by its freshly derived spec. Each threshold is then
/// computed on the activations the sparse model actually produces, which
/// keeps observed sparsity on target even when upstream pruning shrinks
/// downstream magnitudes. Always per-hook.
pub fn calibrate_sequential(
    model: &Model,
    stream: &[DenseMatrix],
    targets: SiteTargets,
    estimator: ModeEstimator,
    centering: CenteringPolicy,
    config: &CalibrationConfig,
) -> Result<BTreeMap<HookPoint, PruneSpec>> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::EmptyStream("calibration stream has no batches".into()));
    }
    let kind = model.config().ffn_kind;
    let mut states: Vec<DenseMatrix> = stream.to_vec();
    let mut specs = BTreeMap::new();
    for b in 0..model.blocks().len() {
        let inputs: Vec<DenseMatrix> = states.iter().map(|s| model.block_input(s)).collect();

        let hu = HookPoint::up_gate(b);
        let up_target = targets.for_site(hu.site);
        let up_cut = if up_target == 0.0 {
            None
        } else {
            let mut st = config.new_stats(&hu.layer_id());
            for x in &inputs {
                st.observe(x);
            }
            let spec = spec_from_stats(&st, &hu, up_target, centering.centers(kind, hu.site), estimator)?;
            let cut = Cut { tau: spec.tau, eta: spec.eta };
            specs.insert(hu, spec);
            Some(cut)
        };

        let hd = HookPoint::down(b);
        let down_target = targets.for_site(hd.site);
        let down_cut = if down_target == 0.0 {
            None
        } else {
            let mut st = config.new_stats(&hd.layer_id());
            for x in &inputs {
                let t = model.run_block(b, x, up_cut, None, true);
                if let Some(d) = &t.down_input {
                    st.observe(d);
                }
            }
            let spec = spec_from_stats(&st, &hd, down_target, centering.centers(kind, hd.site), estimator)?;
            let cut = Cut { tau: spec.tau, eta: spec.eta };
            specs.insert(hd, spec);
            Some(cut)
        };

        states = states
            .into_iter()
            .zip(&inputs)
            .map(|(s, x)| {
                let t = model.run_block(b, x, up_cut, down_cut, false);
                model.block_output(s, t.output)
            })
            .collect::<Result<_>>()?;
    }
    Ok(specs)
}
