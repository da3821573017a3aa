//! Measurements on calibrated models: observed sparsity against targets,
//! the mode-centering ablation, batch overlap of pruned channels, and the
//! two-axis Pareto sweep.

mod ablation;
mod bench;
mod overlap;
mod pareto;
mod sparsity;

pub use ablation::{
    achievable_sparsity, fixed_threshold_gain, mode_centering_ablation, shifted_gelu_mixture,
    AblationOptions, AblationResult, AblationRow, FixedThresholdGain,
};
pub use bench::{bench_cats, bench_dense, bench_scap, mac_bench, BenchRow, BenchTable, Scheme};
pub use overlap::{independent_overlap, overlap_curve, overlap_sparsity, OverlapCurve};
pub use pareto::{
    dominates, pareto_front, pareto_sweep, pareto_sweep_with, scap_label, SweepEntry, SweepOptions,
    SweepResult,
};
pub use sparsity::{
    block_ffn_sparsity, evaluate, measure_sparsity, reconstruction_error, HookSparsity, SiteSparsity,
    SparsityReport,
};
