//! Conditional variational auto-encoder for semantic segmentation.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autograd`], [`nn`]), diagonal-Gaussian algebra ([`distributions`]),
//! the encoder/decoder networks ([`model`]), the staged training schedule
//! ([`train`]), a synthetic dataset with locally ambiguous structure
//! ([`data`]), evaluation metrics ([`metrics`]) and independent numerical
//! oracles ([`oracle`]) used to verify gradients, divergences and the
//! variational bound.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{concat, Gradients, Tape, Var};
pub use distributions::{DiagGaussian, GaussianParams};
pub use error::{Error, Result};
pub use model::{ArchConfig, Batch, CvaeModel, LossBreakdown, PredictMode};
pub use params::ParamRegistry;
pub use rng::SplitMix64;
pub use tensor::Tensor;
