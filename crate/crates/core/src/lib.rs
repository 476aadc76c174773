//! Foreground-aware 3D virtual staining at desk scale.
//!
//! The crate implements the full training-and-evaluation stack for
//! foreground-aware image-to-image regression on 3D volumes:
//!
//! - [`volume`]: the dense 3D container, its disk format, cropping,
//!   downscaling and patch extraction;
//! - [`foreground`]: Otsu threshold estimation, foreground masks and
//!   threshold-centered standardization;
//! - [`losses`]: masked MSE, soft-thresholded Dice and their weighted
//!   "spotlight" combination, each with analytic gradients;
//! - [`nets`]: a miniature 3D convolutional encoder-decoder with manual
//!   forward/backward passes, Adam, and a seeded training loop;
//! - [`synth`]: deterministic phantom generator producing paired
//!   (transmitted-light proxy, fluorescence proxy, instance labels);
//! - [`metrics`]: PSNR, 3D SSIM and FRC-based resolution;
//! - [`segeval`]: CLAHE + watershed instance segmentation, AP@IoU,
//!   morphological features and profile distances.
//!
//! All operations are deterministic: identical seeds produce identical
//! results bit for bit on the same build.

pub mod filter;
pub mod foreground;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod scalar;
pub mod segeval;
pub mod synth;
pub mod volume;

pub use scalar::Real;
pub use volume::{Dims, LabelVolume, MaskVolume, Volume};
