//! Sparse autoencoders with an optional aligned reparameterization of the
//! encoder, which pins every feature's encoder·decoder inner product to one.
//!
//! The crate covers the numerics (dense matrices, seeded streams, Adam), the
//! model and its analytic gradients, a deterministic trainer with binary
//! checkpoints, synthetic superposition data with a binary activation format,
//! and the evaluation metrics used to compare trained dictionaries.

mod binio;
pub mod data;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    alignment_scores, build_encoder, build_encoder_pseudoinverse, forward, sparsity_penalty,
    total_loss, Activation, EncoderMode, ForwardOutput, LossBreakdown, Penalty, SaeParams,
    SaeVariant, TensorName,
};
pub use data::{gen_synthetic, read_activations, write_activations, ActivationSet, SyntheticSpec};
pub use grad::{backward, grad_check, GradSet};
pub use metrics::{evaluate, explained_variance, mmcs, mmcs_symmetric, MetricsRecord};
pub use numerics::{Matrix, RngStream};
pub use trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
