//! Synthetic agents with closed-form failure probabilities, the default
//! benchmark suite, offline and evaluation datasets, and ranking metrics.

mod agent;
mod dataset;
pub mod metrics;
mod suite;

pub use agent::{
    AgentFamily, Perturbation, Region, SyntheticAgentSpec, DEFAULT_INSIDE_PROB, DEFAULT_OUTSIDE_PROB,
};
pub use dataset::{
    generate_offline_dataset, manifest_path, read_dataset_csv, split_sizes, write_dataset_csv,
    EvalManifest, EvaluationDataset, OfflineDataset,
};
pub use metrics::{
    average_precision, evaluate, metrics_from_scores, operating_point, precision_at_recall,
    MetricsReport, OperatingPoint, PrCurve,
};
pub use suite::{
    ball_volume, grid2, interior_point, noncentral_chi2_cdf, region_mass, swarm60, walker10,
    Benchmark, Naturalistic, RegionMass, BENCHMARK_NAMES,
};
