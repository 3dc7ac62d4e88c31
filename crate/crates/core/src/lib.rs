//! Unsupervised anomaly detection with denoising diffusion models.
//!
//! A U-Net noise predictor is trained on normal samples only. At test time
//! an input is partially noised, denoised back through the learned reverse
//! chain, and scored by a blend of pixel reconstruction error and the
//! distance between frozen-network features of input and reconstruction.
//! One-dimensional signals enter the same pipeline as CWT scalograms.

pub mod atomic;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod perception;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod training;
pub mod wavelets;

pub(crate) mod rng;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
