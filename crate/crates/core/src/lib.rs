//! Federated fine-tuning simulator for tri-factorized LoRA adapters.
//!
//! Clients train `W + A·C·B` adapters locally and share only the small core
//! `C`. The server builds client affinities from uploaded data summaries
//! (per-category Gaussian mixtures compared by optimal transport) and from
//! the cores themselves (linear CKA), then sends each client a personalized
//! weighted average of the other clients' cores.

pub mod adapter;
pub mod aggregation;
pub mod config;
pub mod error;
pub mod federation;
pub mod partition;
pub mod privacy;
pub mod seed;
pub mod similarity_data;
pub mod similarity_model;
pub mod training;

pub use adapter::{init_adapter, param_counts, AdapterGradients, ModelShapeConfig, ParamCounts, TriLoraAdapter, Trainable};
pub use aggregation::{build_plan, AggregationPlan, SimilarityMatrix};
pub use config::{ExperimentConfig, Method};
pub use error::{Error, Result};
pub use federation::{run_experiment, Federation, Message, RoundRecord, RunResult, Summary};
pub use partition::{Dataset, PartitionSpec};
pub use privacy::Surface;
pub use training::{LocalModel, TrainConfig};
