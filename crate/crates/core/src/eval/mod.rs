//! Metrics and experiment orchestration.

pub mod experiment;
pub mod metrics;

pub use experiment::{
    default_large_tau, run_experiment, write_artifacts, ExperimentConfig, ExperimentResult,
    HyperSeries, Manifest, Method, SmallImageSummary,
};
pub use metrics::{
    compare_methods, compare_series, lambda_series_report, rmse_by_tissue, spearman, tail_mean,
    Comparison, LambdaReport, RmseAccumulator, RmseSeries, RmseTable,
};
