//! Supervised learning of analysis-sparsity dictionaries.
//!
//! Given pairs of clean signals `w` and noisy observations `y`, the crate
//! learns an analysis operator `D` such that denoising with the penalty
//! `||D^T w||_1` reproduces the clean signals. The denoiser is a dual
//! FISTA solver whose iterations are recorded on a reverse-mode tape, so
//! the reconstruction error can be differentiated with respect to `D`.
//!
//! Modules, bottom up: [`linalg`] (dense tensors, seeded randomness,
//! power iteration), [`autodiff`] (the tape), [`denoiser`], [`learner`]
//! (the outer loop and dictionary metrics), [`baseline`] (a smoothed-l1
//! benchmark), [`datagen`] (synthetic signals and the dataset format) and
//! [`cli`].

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod learner;
pub mod linalg;

pub use error::{Error, Result};
