//! Multimodal detection of patronizing and condescending language in short
//! videos: feature ingestion, optimal-transport alignment, gated state-space
//! fusion, comment and sentiment-knowledge branches, training and evaluation.

pub mod alignment;
pub mod audio;
pub mod classifier;
pub mod comments;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod sentiment;
pub mod synthetic;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use evaluation::{compute_metrics, paired_t_test, run_ablation, MetricsReport};
pub use ingest::{FeatureSequence, Modality, VideoSample};
pub use linalg::Matrix;
pub use model::{ModelConfig, ModelParams};
pub use training::{train, TrainConfig};
