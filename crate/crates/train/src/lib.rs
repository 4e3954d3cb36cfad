//! Training, embedding export, frame metrics and the ablation matrix.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use config::{Task, TrainConfig};
pub use dataset::{load_sample, load_split, Sample};
pub use error::{Result, TrainError};
pub use metrics::{evaluate_frames, MetricsReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineResult};
pub use train::{train_base, train_downstream, EpochRecord};
