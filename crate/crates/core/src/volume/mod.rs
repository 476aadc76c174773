//! Dense 3D containers and the operations shared by every stage of the
//! pipeline: disk I/O, corner-anchored cropping, 2x mean-pool downscaling
//! and patch extraction.
//!
//! Axis order is Z-major/X-minor everywhere (`data[z][y][x]` flattened).

mod io;

pub use io::{load_labels, load_volume, save_labels, save_volume};

use crate::scalar::Real;
use thiserror::Error;

/// Errors raised by container construction, geometry ops and disk I/O.
#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("dimension {dim} is smaller than the required multiple {min}")]
    TooSmall { dim: usize, min: usize },
    #[error("shape {0} has an odd dimension; all dimensions must be even")]
    OddShape(Dims),
    #[error("patch origin {origin} + size {size} exceeds volume shape {shape}")]
    OutOfBounds {
        origin: Dims,
        size: Dims,
        shape: Dims,
    },
    #[error("shape mismatch: {a} vs {b}")]
    ShapeMismatch { a: Dims, b: Dims },
    #[error("invalid volume: {0}")]
    Invalid(String),
}

/// Voxel counts along (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Self { z, y, x }
    }

    /// Total voxel count.
    pub fn len(self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Flat index of voxel (z, y, x).
    #[inline(always)]
    pub fn index(self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.z, self.y, self.x)
    }
}

/// Dense 3D scalar field with voxel-size metadata, Z-major/X-minor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    dims: Dims,
    /// Voxel edge lengths in micrometers, (z, y, x) order.
    voxel_size: [f64; 3],
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(dims: Dims, voxel_size: [f64; 3], data: Vec<T>) -> Result<Self, VolumeError> {
        if data.len() != dims.len() {
            return Err(VolumeError::Invalid(format!(
                "data length {} does not match shape {} ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!(
                "voxel sizes must be strictly positive, got {voxel_size:?}"
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: Dims, voxel_size: [f64; 3]) -> Self {
        Self::new(dims, voxel_size, vec![T::zero(); dims.len()]).expect("positive voxel size")
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(dims: Dims, voxel_size: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.z {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, voxel_size, data).expect("length matches by construction")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(z, y, x);
        self.data[i] = v;
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Arithmetic mean, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|v| v.to64()).sum();
        sum / self.data.len() as f64
    }

    /// Population standard deviation, accumulated in f64.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let ss: f64 = self
            .data
            .iter()
            .map(|v| {
                let d = v.to64() - mean;
                d * d
            })
            .sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts voxel values to another precision.
    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|v| U::from64(v.to64())).collect(),
        }
    }

    /// Crops to the largest corner-anchored sub-volume whose dimensions are
    /// multiples of `m`.
    pub fn crop_to_multiple(&self, m: usize) -> Result<Self, VolumeError> {
        assert!(m > 0, "multiple must be positive");
        let d = self.dims;
        for dim in [d.z, d.y, d.x] {
            if dim < m {
                return Err(VolumeError::TooSmall { dim, min: m });
            }
        }
        let out = Dims::new(d.z / m * m, d.y / m * m, d.x / m * m);
        if out == d {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(out.len());
        for z in 0..out.z {
            for y in 0..out.y {
                let row = d.index(z, y, 0);
                data.extend_from_slice(&self.data[row..row + out.x]);
            }
        }
        Self::new(out, self.voxel_size, data)
    }

    /// Halves every dimension by 2x2x2 mean pooling; voxel size doubles.
    pub fn downscale_half(&self) -> Result<Self, VolumeError> {
        let d = self.dims;
        if d.z % 2 != 0 || d.y % 2 != 0 || d.x % 2 != 0 {
            return Err(VolumeError::OddShape(d));
        }
        let out = Dims::new(d.z / 2, d.y / 2, d.x / 2);
        let eighth = T::from64(0.125);
        let mut data = Vec::with_capacity(out.len());
        for z in 0..out.z {
            for y in 0..out.y {
                for x in 0..out.x {
                    let mut s = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s = s + self.get(2 * z + dz, 2 * y + dy, 2 * x + dx);
                            }
                        }
                    }
                    data.push(s * eighth);
                }
            }
        }
        let vs = self.voxel_size;
        Self::new(out, [vs[0] * 2.0, vs[1] * 2.0, vs[2] * 2.0], data)
    }

    /// Copies the contiguous sub-volume at `origin` with the given `size`.
    pub fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self, VolumeError> {
        let d = self.dims;
        if origin.z + size.z > d.z || origin.y + size.y > d.y || origin.x + size.x > d.x {
            return Err(VolumeError::OutOfBounds {
                origin,
                size,
                shape: d,
            });
        }
        let mut data = Vec::with_capacity(size.len());
        for z in 0..size.z {
            for y in 0..size.y {
                let row = d.index(origin.z + z, origin.y + y, origin.x);
                data.extend_from_slice(&self.data[row..row + size.x]);
            }
        }
        Self::new(size, self.voxel_size, data)
    }
}

/// Binary foreground indicator per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: Dims,
    bits: Vec<bool>,
}

impl MaskVolume {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self, VolumeError> {
        if bits.len() != dims.len() {
            return Err(VolumeError::Invalid(format!(
                "mask length {} does not match shape {}",
                bits.len(),
                dims
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline(always)]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.dims.index(z, y, x)]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self, VolumeError> {
        let d = self.dims;
        if origin.z + size.z > d.z || origin.y + size.y > d.y || origin.x + size.x > d.x {
            return Err(VolumeError::OutOfBounds {
                origin,
                size,
                shape: d,
            });
        }
        let mut bits = Vec::with_capacity(size.len());
        for z in 0..size.z {
            for y in 0..size.y {
                let row = d.index(origin.z + z, origin.y + y, origin.x);
                bits.extend_from_slice(&self.bits[row..row + size.x]);
            }
        }
        Self::new(size, bits)
    }
}

/// Non-negative integer instance labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    voxel_size: [f64; 3],
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims, voxel_size: [f64; 3], labels: Vec<u32>) -> Result<Self, VolumeError> {
        if labels.len() != dims.len() {
            return Err(VolumeError::Invalid(format!(
                "label data length {} does not match shape {}",
                labels.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            labels,
        })
    }

    pub fn zeros(dims: Dims, voxel_size: [f64; 3]) -> Self {
        Self {
            dims,
            voxel_size,
            labels: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline(always)]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u32 {
        self.labels[self.dims.index(z, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u32) {
        let i = self.dims.index(z, y, x);
        self.labels[i] = v;
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Voxel count per label id (index 0 holds the background count).
    pub fn label_volumes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.max_label() as usize + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Renumbers labels compactly to 1..n preserving ascending id order.
    pub fn relabel_compact(&mut self) {
        let max = self.max_label() as usize;
        let mut present = vec![false; max + 1];
        for &l in &self.labels {
            present[l as usize] = true;
        }
        let mut remap = vec![0u32; max + 1];
        let mut next = 0u32;
        for (id, &p) in present.iter().enumerate().skip(1) {
            if p {
                next += 1;
                remap[id] = next;
            }
        }
        for l in &mut self.labels {
            *l = remap[*l as usize];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume<f32> {
        Volume::from_fn(dims, [1.0, 1.0, 1.0], |z, y, x| {
            (z * 100 + y * 10 + x) as f32
        })
    }

    #[test]
    fn crop_floor_to_multiple() {
        let v = ramp(Dims::new(50, 300, 400));
        let c = v.crop_to_multiple(16).unwrap();
        assert_eq!(c.dims(), Dims::new(48, 288, 400));
        // corner anchored at the origin
        assert_eq!(c.get(0, 0, 0), v.get(0, 0, 0));
        assert_eq!(c.get(47, 287, 399), v.get(47, 287, 399));
    }

    #[test]
    fn crop_already_multiple_is_identity() {
        let v = ramp(Dims::new(32, 64, 64));
        let c = v.crop_to_multiple(16).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_too_small() {
        let v = ramp(Dims::new(15, 64, 64));
        assert!(matches!(
            v.crop_to_multiple(16),
            Err(VolumeError::TooSmall { dim: 15, min: 16 })
        ));
    }

    #[test]
    fn downscale_constant_stays_constant() {
        let v = Volume::<f32>::from_fn(Dims::new(4, 6, 8), [1.0; 3], |_, _, _| 3.25);
        let d = v.downscale_half().unwrap();
        assert_eq!(d.dims(), Dims::new(2, 3, 4));
        assert!(d.data().iter().all(|&v| v == 3.25));
        assert_eq!(d.voxel_size(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn downscale_block_mean() {
        let v = Volume::<f32>::new(
            Dims::new(2, 2, 2),
            [1.0; 3],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let d = v.downscale_half().unwrap();
        assert_eq!(d.data(), &[0.5]);
    }

    #[test]
    fn downscale_odd_rejected() {
        let v = ramp(Dims::new(3, 4, 4));
        assert!(matches!(v.downscale_half(), Err(VolumeError::OddShape(_))));
    }

    #[test]
    fn downscale_preserves_global_mean() {
        let v = ramp(Dims::new(4, 6, 8));
        let d = v.downscale_half().unwrap();
        assert!((v.mean() - d.mean()).abs() < 1e-4);
    }

    #[test]
    fn patch_identity_and_single_voxel() {
        let v = ramp(Dims::new(3, 4, 5));
        let full = v
            .extract_patch(Dims::new(0, 0, 0), v.dims())
            .unwrap();
        assert_eq!(full, v);
        let one = v
            .extract_patch(Dims::new(1, 2, 3), Dims::new(1, 1, 1))
            .unwrap();
        assert_eq!(one.data(), &[v.get(1, 2, 3)]);
    }

    #[test]
    fn patch_out_of_bounds() {
        let v = ramp(Dims::new(2, 2, 4));
        let r = v.extract_patch(Dims::new(0, 0, 1), Dims::new(1, 1, 4));
        assert!(matches!(r, Err(VolumeError::OutOfBounds { .. })));
    }

    #[test]
    fn patch_values_match_brute_force() {
        let v = ramp(Dims::new(5, 6, 7));
        let o = Dims::new(1, 2, 3);
        let s = Dims::new(3, 2, 4);
        let p = v.extract_patch(o, s).unwrap();
        for z in 0..s.z {
            for y in 0..s.y {
                for x in 0..s.x {
                    assert_eq!(p.get(z, y, x), v.get(o.z + z, o.y + y, o.x + x));
                }
            }
        }
    }

    #[test]
    fn relabel_compacts_gaps() {
        let mut l = LabelVolume::new(
            Dims::new(1, 1, 6),
            [1.0; 3],
            vec![0, 5, 5, 2, 0, 9],
        )
        .unwrap();
        l.relabel_compact();
        assert_eq!(l.labels(), &[0, 2, 2, 1, 0, 3]);
        assert_eq!(l.max_label(), 3);
    }
}
