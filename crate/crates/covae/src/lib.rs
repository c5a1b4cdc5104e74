//! Structured-covariance VAE generative regularizer for compressed-sensing
//! MRI reconstruction.
//!
//! The crate provides:
//!
//! - [`sparse_gaussian`]: Gaussians with sparse lower-triangular precision
//!   factors over causal pixel neighborhoods (log-dets, solves, sampling,
//!   covariance rows — all without materializing dense matrices);
//! - [`mri`]: an undersampled-Fourier forward model with radial and
//!   Cartesian-random sampling masks and a closed-form quadratic solver;
//! - [`nn`] and [`model`]: a small hand-rolled convolutional VAE whose
//!   decoder emits both a mean image and the precision-factor channels;
//! - [`train`]: two-stage training (mean first, covariance second) plus a
//!   residual CNN denoiser for the plug-and-play baseline;
//! - [`recon`]: map-style reconstruction with the learned regularizer,
//!   latent-space range search, decoder adaptation, least squares, total
//!   variation, and plug-and-play ADMM;
//! - [`harness`]: dataset synthesis/ingestion, tensor/container file formats,
//!   sweep and ablation drivers, and introspection figures.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod mri;
pub mod nn;
pub mod recon;
pub mod sparse_gaussian;
pub mod train;

pub use error::{Error, Result};
