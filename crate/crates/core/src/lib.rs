//! Coded-aperture snapshot spectral reconstruction by degradation-aware
//! unfolding with a half-shuffle transformer denoiser.
//!
//! * [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`cassi`]: the sensing operator Φ and file formats.
//! * [`dauf`]: parameter estimation, the closed-form data projection and
//!   the unfolding loop.
//! * [`hst`]: the half-shuffle transformer denoiser.
//! * [`train`] and [`metrics`]: toy-scale training and PSNR/SSIM.
//! * [`verify`]: the oracle suite behind `dauhst verify`.

// Guards are written `!(x > 0.0)` so that NaN is rejected along with
// non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cassi;
pub mod dauf;
mod error;
pub mod fileio;
pub mod hst;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
