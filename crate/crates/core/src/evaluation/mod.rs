//! Metrics, robustness sweeps and modality-masking explanations.

pub mod degrade;
pub mod metrics;
pub mod explain;
pub mod report;
pub mod robustness;

pub use explain::{explain, MaskMode, MaskSpec};
pub use report::{evaluate, MetricsReport, RunInfo};
pub use robustness::{sweep, RobustnessReport};
