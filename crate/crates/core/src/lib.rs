//! Dense/sparse switchable pre-training of a small ReLU language model.
//!
//! The crate is organized bottom-up: [`numerics`] (matrices, differentiable
//! primitives, Adam), [`model`] (the GPT), [`clustering`] (balanced k-means
//! over FFN neurons), [`moe`] (expert splitting, gating, FLOPs),
//! [`analysis`] (sparsity and ARI), [`scheduler`] (the dense/sparse phase
//! machine), [`checkpoint`] and [`harness`] (corpus, training, evaluation).

pub mod analysis;
pub mod checkpoint;
pub mod clustering;
pub mod error;
pub mod harness;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod scheduler;

pub use analysis::{
    activation_sparsity, adjusted_rand_index, pattern_similarity, ActivationSample, SimilarityMode, SimilarityReport,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use clustering::{balanced_kmeans, cluster_with_warmstart, ClusteringOutcome, InitKind, KMeansInit, Partition};
pub use error::{CheckpointError, Error, Result};
pub use harness::{Corpus, MetricsRecord, TrainConfig, TrainMode, Trainer};
pub use model::{FeedForward, FfnWeights, Gpt, ModelConfig};
pub use moe::{merge_experts, smoe_forward, split_ffn, Routing, SmoeFfn};
pub use numerics::{AdamConfig, AdamState, Matrix, ParamSet, RngState};
pub use scheduler::{Phase, Policy, SchedulerState, SsdConfig};
