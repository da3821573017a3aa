//! Persistence: the weight container and versioned JSON reports.

mod container;
mod report;

pub use container::{
    decode_model, encode_container, encode_model, load_model, save_model, split_container, Manifest,
    TensorEntry, DTYPE_F32,
};
pub use report::{
    decode_report, encode_report, load_report, save_report, Report, ReportData, ReportKind, REPORT_VERSION,
};
