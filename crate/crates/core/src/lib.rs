//! Core library for a cascading latent-diffusion map tile generator.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and the
//!   convolution / normalization / resampling kernels everything else uses.
//! - [`nn`]: layers, initialization, the optimizer and checkpoint I/O.
//! - [`tile`]: quadtree tile arithmetic, the zoom-level scale table and
//!   multi-stage cascade planning.
//! - [`diffusion`]: noise schedules and DDPM/DDIM steps.
//! - [`codec`]: pixel↔latent codecs (an exact isometry and a small learned
//!   autoencoder).
//! - [`condition`]: prompt/time embeddings and the reference-tile fusion
//!   stack (spatially-adaptive modulation, the multi-feature encoder and the
//!   scale-feature adapter).
//! - [`denoiser`]: the conditional U-Net and its training step.
//! - [`cascade`]: seeded tile-by-tile generation across zoom levels,
//!   stitching and seam scoring.
//! - [`dataset`]: tile ingestion, cascade-reference construction, region
//!   splits and the manifest format.
//! - [`metrics`]: Y-channel PSNR/SSIM and a Fréchet feature distance with a
//!   fixed projection network.
//! - [`gradsuite`]: named finite-difference verification of every trainable
//!   layer, shared by the command-line `grad-check` and the test suite.

pub mod cascade;
pub mod codec;
pub mod condition;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod fixtures;
pub mod metrics;
pub mod selftest;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tile;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
