//! Configuration, optimization, metrics, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Config, DataConfig, DataKind, Splits};
pub use metrics::{mean_std, MetricSummary, Metrics, Scalars};
pub use optim::{AdamW, AdamWConfig};
pub use train::{evaluate, run_seed_sweep, train, write_jsonl, EpochRecord, Evaluation, SeedRun, SweepResult, TrainOutcome};
