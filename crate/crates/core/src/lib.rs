//! Multiphase CT quality-enhancement toolkit.
//!
//! The crate covers the full desk-scale workflow:
//!
//! * [`volume`] / [`nifti`] / [`phantom`] — volume representation, a small
//!   NIfTI-1 subset, HU windowing, trilinear resampling, cropping, and
//!   seeded synthetic multiphase phantoms.
//! * [`degrade`] — a seeded two-stage blur/resize/noise degradation pipeline
//!   with replayable recipes.
//! * [`autograd`] — a minimal reverse-mode differentiation engine providing
//!   exactly the tensor operations the restoration network needs, plus a
//!   finite-difference gradient checker.
//! * [`model`] — the 3D progressive-fusion non-local restoration network
//!   mapping three degraded phase volumes to one restored portal venous
//!   volume, with binary checkpoints.
//! * [`loss`] — 3D Sobel edge responses and the combined L1 + edge objective.
//! * [`train`] — patch sampling, rotation augmentation, Adam, and the
//!   training/validation loop.
//! * [`metrics`] — PSNR, 3D SSIM, Dice, normalized surface distance and the
//!   exact paired Wilcoxon signed-rank test.
//!
//! The `pfnl3d` binary exposes all of it as subcommands; see the README.

pub mod autograd;
pub mod cli;
pub mod degrade;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
