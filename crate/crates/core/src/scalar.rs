//! Scalar abstraction over the two voxel precisions used in the crate.
//!
//! Volumes are stored as `f32` on disk and in the pipeline; gradient
//! checking runs the same code paths in `f64`.

use num_traits::Float;

/// Floating-point voxel scalar (`f32` or `f64`).
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from64(v: f64) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to64(self) -> f64 {
        self
    }
}
