//! Training recipe: config, datasets, Nesterov SGD with warmup + cosine
//! schedule, and the train / evaluate loops.

mod config;
mod data;
mod optim;
mod run;

pub use config::{DatasetKind, DatasetSpec, TrainConfig, KEYS};
pub use data::{load_datasets, synthetic, Batch, Batcher, Dataset, Datasets};
pub use optim::{lr_schedule, Sgd};
pub use run::{
    evaluate, evaluate_with, train, train_from, EvalMetrics, MetricsRow, TrainOutcome,
    METRICS_HEADER,
};
