//! Multi-fighter flight trajectory prediction.
//!
//! An encoder-decoder network built from scratch on a taped reverse-mode
//! autodiff core: 1-D convolution over each fighter's observed track,
//! per-feature input attention, social pooling of neighboring fighters'
//! hidden states on a 3-D lattice, a temporal LSTM, and an autoregressive
//! sliding-window decoder that predicts eight future positions from the
//! last eight observed ones.
//!
//! The crate ships the full stack: data pipeline (CSV ingestion, low-pass
//! filtering, resampling, window construction, chronological 4:1 split,
//! synthetic maneuver generator), trainer (sum-of-squares loss, Adam with
//! stepwise learning-rate decay), evaluator (ADE/FDE in kilometers, PAT in
//! milliseconds, ablation harness), and a CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
