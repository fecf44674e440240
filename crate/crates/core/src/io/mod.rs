//! File formats, run configuration and cost accounting.

pub mod config;
pub mod cost;
pub mod pcseq;

pub use config::RunConfig;
pub use cost::{cost_report, count_params, estimate_flops, CostReport};
