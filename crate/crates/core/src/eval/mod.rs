//! Metrics, checkpoints, generation pipelines and experiment drivers.

pub mod checkpoint;
mod experiment;
mod metrics;
pub mod pipeline;
mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use experiment::{
    bench_pipeline, evaluate, oracle, split, sweep_alpha, sweep_k, train_pier, EvalConfig, ExperimentConfig, ModelSpec, SweepConfig,
};
pub use metrics::{auc, bench_cost, hr_at_1, logloss, CostSummary, MIN_REPETITIONS, WARMUP_REQUESTS};
pub use pipeline::{Generator, PipelineConfig};
pub use report::{format_table, run_id, MetricsReport};
