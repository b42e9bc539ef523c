//! Desk-scale laboratory for learned feedback coding over AWGN channels.
//!
//! The crate trains and evaluates a recurrent autoencoder feedback code
//! (power-constrained encoder, attention decoder) against classical
//! baselines (repetition, tail-biting convolutional, learned-linear), all
//! on top of a deterministic counter-based RNG and a from-scratch
//! reverse-mode autodiff tape.
//!
//! Core numerics are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the canonical lab precision is `f64` and the type aliases below pin it.

pub mod scalar;
pub mod tensor;
pub mod stats;
pub mod rng;
pub mod tape;
pub mod nn;
pub mod optim;
pub mod gradcheck;
pub mod encoder;
pub mod decoder;
pub mod unroll;
pub mod trainer;
pub mod baselines;
pub mod eval;
pub mod model_io;
pub mod config;

use thiserror::Error as ThisError;

/// Crate-wide error type.
#[derive(ThisError, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    #[error("model file error: {0}")]
    ModelIo(String),
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("frozen normalization statistics required but absent")]
    MissingNormStats,
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

// Canonical f64 specializations used by the trainer, evaluator and CLI.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
