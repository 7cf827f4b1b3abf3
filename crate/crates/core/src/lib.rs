//! Receptive-field controlled comparison of CNN, RNN, Transformer, and
//! Conformer encoders for frame-level phoneme classification.
//!
//! The crate carries its own reverse-mode autodiff over `f64` tensors, the
//! four encoder families, receptive-field arithmetic, feature extraction and
//! corpus tooling, and a training/evaluation/benchmark harness.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod models;
pub mod params;
pub mod rf;
pub mod rng;
pub mod store;
pub mod tensor;

pub use error::{ConfigError, Error, Result};
pub use tensor::Tensor;
