//! Histogram-based foreground estimation and threshold-centered
//! standardization.
//!
//! The foreground mask is a deliberately weak approximation: an Otsu cut
//! on the target volume's 256-bin histogram. Everything downstream (the
//! masked losses, patch filtering, the Dice soft-threshold at zero) leans
//! on the convention that standardized foreground is `>= 0`.

use crate::scalar::Real;
use crate::volume::{MaskVolume, Volume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForegroundError {
    #[error("constant image: operation needs at least two distinct values")]
    ConstantImage,
}

/// Otsu threshold plus the per-candidate scores that produced it.
#[derive(Debug, Clone)]
pub struct OtsuResult {
    /// Intensity cut; voxels `>= threshold` are foreground.
    pub threshold: f64,
    /// 257 monotone bin edges spanning `[min, max]`.
    pub bin_edges: Vec<f64>,
    /// Between-class variance per candidate cut (one per bin boundary).
    pub inter_class_variance: Vec<f64>,
}

pub const OTSU_BINS: usize = 256;

/// Histogram of `v` over `nbins` equal-width bins spanning `[min, max]`.
/// The top edge is inclusive.
pub fn histogram<T: Real>(v: &Volume<T>, nbins: usize) -> (Vec<u64>, Vec<f64>) {
    let min = v.min().to64();
    let max = v.max().to64();
    let width = (max - min) / nbins as f64;
    let mut counts = vec![0u64; nbins];
    for &val in v.data() {
        let bin = if width > 0.0 {
            (((val.to64() - min) / width) as usize).min(nbins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    let edges = (0..=nbins)
        .map(|i| min + width * i as f64)
        .collect();
    (counts, edges)
}

/// Otsu's method: the bin boundary maximizing between-class variance
/// `w0*w1*(mu0-mu1)^2`. Ties break toward the smallest threshold. The
/// returned threshold is the lower edge of the first bin of the upper
/// class.
pub fn otsu_threshold<T: Real>(v: &Volume<T>, nbins: usize) -> Result<OtsuResult, ForegroundError> {
    assert!(nbins >= 2);
    if v.min() == v.max() {
        return Err(ForegroundError::ConstantImage);
    }
    let (counts, edges) = histogram(v, nbins);
    let total = v.data().len() as f64;
    let centers: Vec<f64> = (0..nbins)
        .map(|i| 0.5 * (edges[i] + edges[i + 1]))
        .collect();
    let sum_total: f64 = counts
        .iter()
        .zip(&centers)
        .map(|(&c, &m)| c as f64 * m)
        .sum();

    // cut index c splits bins into [0, c) and [c, nbins)
    let mut scores = Vec::with_capacity(nbins);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for c in 0..nbins {
        let score = if w0 == 0.0 || w0 == total {
            0.0
        } else {
            let w1 = total - w0;
            let mu0 = sum0 / w0;
            let mu1 = (sum_total - sum0) / w1;
            let d = mu0 - mu1;
            (w0 / total) * (w1 / total) * d * d
        };
        scores.push(score);
        if score > best.1 {
            best = (c, score);
        }
        w0 += counts[c] as f64;
        sum0 += counts[c] as f64 * centers[c];
    }

    Ok(OtsuResult {
        threshold: edges[best.0],
        bin_edges: edges,
        inter_class_variance: scores,
    })
}

/// Binary mask: bit set iff voxel `>= t`.
pub fn foreground_mask<T: Real>(v: &Volume<T>, t: f64) -> MaskVolume {
    let tt = T::from64(t);
    let bits = v.data().iter().map(|&x| x >= tt).collect();
    MaskVolume::new(v.dims(), bits).expect("shape matches")
}

/// Fraction of set bits in `m`.
pub fn fg_fraction(m: &MaskVolume) -> f64 {
    if m.bits().is_empty() {
        return 0.0;
    }
    m.count_ones() as f64 / m.bits().len() as f64
}

/// Centers `v` at `t` and scales by the volume's population standard
/// deviation, so that foreground (>= t) maps to values >= 0. Returns the
/// standardized volume and the scale used.
pub fn standardize<T: Real>(v: &Volume<T>, t: f64) -> Result<(Volume<T>, f64), ForegroundError> {
    let sigma = v.std();
    if sigma <= 0.0 {
        return Err(ForegroundError::ConstantImage);
    }
    let inv = 1.0 / sigma;
    let out = v.map(|x| T::from64((x.to64() - t) * inv));
    Ok((out, sigma))
}
