//! Learned hierarchical Semantic IDs for recommendation.
//!
//! Item embeddings are quantized into short tuples of codebook indices by a
//! two-tower model: a user tower over click sequences and an item tower over
//! the target item share one residual codebook per level, and every level
//! rotates its input with a learned near-orthogonal map, keeps the top-k
//! scored dimensions as the primary feature, quantizes it, and carries the
//! remainder to the next level.
//!
//! Module map:
//!
//! - [`autograd`]: reverse-mode differentiation over `f64` tensors
//! - [`embeddings`]: item prompts, embedding tables, synthetic corpora
//! - [`orq`]: the orthogonal residual quantization stack
//! - [`dfi`]: the dual-tower model and its losses
//! - [`training`]: optimization loop, early stopping, checkpoints
//! - [`baselines`]: RQ-KMeans and a small RQ-VAE
//! - [`eval`]: AUC, F1, Hit@k, codebook statistics, NMI
//! - [`probe`]: a causal next-SID predictor used to score SID schemes
//! - [`pipeline`]: corpus directories, SID alignment, metric reports
//! - [`cli`]: the `dos` command line

pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod dfi;
pub mod embeddings;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod orq;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sid;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
