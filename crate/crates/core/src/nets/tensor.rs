//! Dense 5D activation tensor, `[batch][channel][z][y][x]` contiguous.

use crate::scalar::Real;
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub b: usize,
    pub c: usize,
    pub spatial: Dims,
    data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(b: usize, c: usize, spatial: Dims) -> Self {
        Self {
            b,
            c,
            spatial,
            data: vec![T::zero(); b * c * spatial.len()],
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline(always)]
    pub fn channel(&self, bi: usize, ci: usize) -> &[T] {
        let n = self.spatial.len();
        let off = (bi * self.c + ci) * n;
        &self.data[off..off + n]
    }

    #[inline(always)]
    pub fn channel_mut(&mut self, bi: usize, ci: usize) -> &mut [T] {
        let n = self.spatial.len();
        let off = (bi * self.c + ci) * n;
        &mut self.data[off..off + n]
    }

    /// Wraps a single volume as a 1x1 batch.
    pub fn from_volume(v: &Volume<T>) -> Self {
        Self {
            b: 1,
            c: 1,
            spatial: v.dims(),
            data: v.data().to_vec(),
        }
    }

    /// Extracts one channel of one batch element as a volume.
    pub fn to_volume(&self, bi: usize, ci: usize, voxel_size: [f64; 3]) -> Volume<T> {
        Volume::new(self.spatial, voxel_size, self.channel(bi, ci).to_vec())
            .expect("channel length matches spatial dims")
    }

    /// Concatenates along the channel axis; shapes must agree.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(a.b, b.b);
        assert_eq!(a.spatial, b.spatial);
        let mut out = Self::zeros(a.b, a.c + b.c, a.spatial);
        for bi in 0..a.b {
            for ci in 0..a.c {
                out.channel_mut(bi, ci).copy_from_slice(a.channel(bi, ci));
            }
            for ci in 0..b.c {
                out.channel_mut(bi, a.c + ci)
                    .copy_from_slice(b.channel(bi, ci));
            }
        }
        out
    }

    /// Splits a channel-concatenated tensor back into two parts.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.c);
        let mut a = Self::zeros(self.b, first, self.spatial);
        let mut b = Self::zeros(self.b, self.c - first, self.spatial);
        for bi in 0..self.b {
            for ci in 0..first {
                a.channel_mut(bi, ci).copy_from_slice(self.channel(bi, ci));
            }
            for ci in first..self.c {
                b.channel_mut(bi, ci - first)
                    .copy_from_slice(self.channel(bi, ci));
            }
        }
        (a, b)
    }
}
