//! Calibrated input-activation pruning for feed-forward blocks.
//!
//! Every FC input is thresholded at `tau`, the `s`-quantile of its
//! calibrated magnitudes, so roughly a fraction `s` of channels (and the
//! matching weight rows) is skipped. Inputs whose distribution peaks away
//! from zero are first shifted by their mode `eta`; the shift is folded
//! into the bias, so the layer computes the same function at `tau = 0`.
//!
//! ```
//! use scap::calib::LayerStats;
//! use scap::prune::{PruneSpec, SparseLinear};
//! use scap::tensor::{DenseMatrix, DenseVector};
//!
//! let x = DenseMatrix::from_rows(&[[0.1f32, -2.0, 0.05, 1.5]]).unwrap();
//! let mut stats = LayerStats::new("fc", 1024, 7);
//! stats.observe(&x);
//! let tau = stats.quantile_threshold(0.5).unwrap();
//!
//! let spec = PruneSpec::new("fc", tau, 0.0, 0.5).unwrap();
//! let layer = SparseLinear::new(DenseMatrix::identity(4), &DenseVector::zeros(4), &spec).unwrap();
//! let (y, ops) = layer.forward(&x).unwrap();
//! assert_eq!(y.row(0), &[0.0, -2.0, 0.0, 1.5]);
//! assert_eq!(ops.macs, 2 * 4);
//! ```

pub mod analysis;
pub mod calib;
pub mod cli;
pub mod data;
mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod prune;
pub mod tensor;

pub use error::{Error, Result};
