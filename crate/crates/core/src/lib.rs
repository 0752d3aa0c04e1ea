//! Class-adapted patch-based image denoising.
//!
//! The library learns a mixture of multivariate generalized Gaussian patch
//! priors from clean grayscale images and removes additive Gaussian noise by
//! self-normalized importance sampling over stored clean patches. Modules:
//!
//! - [`density`]: generalized Gaussian and Gaussian log-densities, fixed-point
//!   scatter estimation, and sampling.
//! - [`prior`]: k-means initialization and hard-assignment mixture learning.
//! - [`model_io`]: binary serialization of learned models.
//! - [`snis`]: importance weights, hard thresholding, and patch estimates.
//! - [`imaging`]: image buffers, patch grids, noise injection, PSNR, and
//!   PGM/PNG file I/O.
//! - [`pipeline`]: full-image denoising with boosted second pass.
//! - [`synth`]: deterministic synthetic text-image generation for experiments.

pub mod config;
pub mod density;
pub mod error;
pub mod imaging;
pub mod model_io;
pub mod pipeline;
pub mod prior;
pub mod seed;
pub mod snis;
pub mod synth;

pub use config::{DenoiseConfig, EstimateMode};
pub use error::{CoreError, Result};
