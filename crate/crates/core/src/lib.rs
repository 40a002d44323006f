//! Desk-scale semantic segmentation built around selective state-space models.
//!
//! The crate is self-contained: a small autodiff tensor core, an S6 selective
//! scan (sequential and work-efficient parallel forms), a Mamba block with 2D
//! cross-scan routing, a pyramid-pooling decoder, and the training/inference
//! pipeline (losses, metrics, optimizer, augmentation, checkpoints, CLI).
//!
//! Everything runs on CPU. `f32` is the working precision for training and
//! inference; all numeric code is generic over [`Scalar`] so the same ops run
//! in `f64` for finite-difference gradient checking.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod ssm;
pub mod tensor;
pub mod trainer;
pub mod tta;

pub use error::{Error, Result};
pub use rng::SplitRng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use cli::run_cli;
