//! Sink-aware post-training pruning for toy transformer language models.
//!
//! The crate provides the full analysis/pruning pipeline at desk scale:
//!
//! - [`numerics`]: dense Cholesky, SPD inversion, masked least squares
//! - [`model`]: a seeded toy transformer running in autoregressive or
//!   masked-diffusion mode, exposing attention maps and layer inputs
//! - [`sinkstats`]: attention-mass statistics, hard/soft sink detection,
//!   spatial/temporal variance, and sink-profile construction
//! - [`calib`]: calibration sampling, diffusion noising, and activation
//!   statistics collection (optionally sink-masked)
//! - [`prune`]: magnitude / Wanda / SparseGPT criteria with unstructured,
//!   n:m, and head-structured sparsity
//! - [`eval`]: reconstruction error, masked accuracy, pseudo-perplexity
//!
//! The crate is `no_std` (with `alloc`); all IO lives in the companion
//! CLI crate.

#![no_std]

extern crate alloc;

pub mod calib;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod prune;
pub mod sinkstats;
pub mod synthetic;

pub use error::Error;
pub use matrix::DenseMatrix;

pub type Result<T> = core::result::Result<T, Error>;
