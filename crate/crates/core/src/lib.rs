//! Multi-task learning over precomputed feature vectors.
//!
//! A single shared dense layer with rectified activation feeds one linear head
//! per task. Tasks may be multi-class (softmax cross-entropy), multi-label
//! (sigmoid binary cross-entropy) or scalar regression (mean absolute error).
//! The per-task losses are combined as `L_t = sum_i w_i * s_i * L_i` and
//! back-propagated jointly through the heads and the shared layer.
//!
//! Module map:
//!
//! - [`nncore`]: dense layer math, losses with gradients, momentum SGD, gradient checking
//! - [`model`]: the multi-task network, combined loss, weight calibration, checkpoints
//! - [`data`]: feature files, metadata, vocabularies, stratified splits, synthetic data
//! - [`engine`]: training loop, evaluation, multi-task vs single-task benchmark
//! - [`metrics`]: top-k accuracy, image-wise MAP, MAE in years, interval accuracy, confusion
//! - [`analysis`]: empirical conditional probabilities, confusion ranking, feature export
//! - [`cli`]: the `mtl` command line

pub mod analysis;
pub mod cli;
pub mod data;
pub mod engine;
mod error;
pub mod metrics;
pub mod model;
pub mod nncore;

pub use error::{Error, Result};
