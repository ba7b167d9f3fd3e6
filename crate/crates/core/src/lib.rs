//! Diffusion-based colorization of line drawings.
//!
//! A conditional denoiser is trained to predict the noise added to colour
//! images given their line drawing, and an ancestral sampler turns Gaussian
//! noise into several distinct colourings of one drawing.
//!
//! * [`tensor`]: tensors and reverse-mode differentiation
//! * [`schedule`]: noise schedule and forward process
//! * [`network`]: the conditional noise predictor
//! * [`trainer`]: epsilon-matching training with RAdam + LookAhead
//! * [`sampler`]: predictor / corrector sampling, colour bias, masks, model switching
//! * [`dataprep`]: line extraction, synthetic data, image I/O
//! * [`diversity`]: pairwise perceptual distances
//! * [`checkpoint`] and [`config`]: on-disk formats

pub mod checkpoint;
pub mod config;
pub mod dataprep;
pub mod diversity;
pub mod error;
pub mod fsutil;
pub mod network;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{DenoiserModel, NetworkConfig};
pub use schedule::Schedule;
pub use tensor::{Element, Tensor};
