//! Desk-scale style-transfer diffusion.
//!
//! A small, fully self-contained stack: a reverse-mode autodiff tensor
//! substrate, raster preprocessing (bilinear resize, Canny, SSIM), patch
//! tokenization, a multi-view style modulator that compresses n local
//! patch token sequences into one, canny-conditioned transformer blocks,
//! a rectified-flow training/sampling loop, and a staged dataset curation
//! pipeline. Everything is CPU-only and deterministic given a seed.

pub mod cli;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod model;
pub mod msm;
pub mod numerics;
pub mod stydit;
pub mod tokenizer;
pub mod util;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
