//! Separable Gaussian filtering with reflective boundary handling.

use crate::volume::{Dims, Volume};

/// Normalized 1D Gaussian taps for the given sigma, truncated at
/// `truncate * sigma`. Sigma 0 yields the identity kernel.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (truncate * sigma).ceil() as isize;
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        taps.push((-(i * i) as f64 * inv).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

#[inline]
fn reflect(i: isize, n: isize) -> usize {
    // scipy-style "reflect" (d c b a | a b c d | d c b a)
    let mut i = i;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn convolve_axis(src: &[f64], dims: Dims, axis: usize, taps: &[f64], dst: &mut [f64]) {
    let radius = (taps.len() / 2) as isize;
    let n = [dims.z, dims.y, dims.x][axis] as isize;
    let stride = match axis {
        0 => dims.y * dims.x,
        1 => dims.x,
        _ => 1,
    } as isize;
    // iterate over all lines along `axis`
    let (outer, inner) = match axis {
        0 => (dims.y, dims.x),
        1 => (dims.z, dims.x),
        _ => (dims.z, dims.y),
    };
    let mut line = vec![0.0f64; n as usize];
    for o in 0..outer {
        for i in 0..inner {
            let base = match axis {
                0 => (o * dims.x + i) as isize,
                1 => ((o * dims.y) * dims.x + i) as isize,
                _ => ((o * dims.y + i) * dims.x) as isize,
            };
            for j in 0..n {
                line[j as usize] = src[(base + j * stride) as usize];
            }
            for j in 0..n {
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let s = j + (k as isize - radius);
                    acc += w * line[reflect(s, n)];
                }
                dst[(base + j * stride) as usize] = acc;
            }
        }
    }
}

/// 3D Gaussian blur with per-axis sigmas (z, y, x order), reflective
/// boundaries, kernels truncated at 4 sigma.
pub fn gaussian_blur_3d(v: &Volume<f32>, sigma_zyx: [f64; 3]) -> Volume<f32> {
    let dims = v.dims();
    let mut a: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let mut b = vec![0.0f64; a.len()];
    for axis in 0..3 {
        let taps = gaussian_kernel(sigma_zyx[axis], 4.0);
        if taps.len() == 1 {
            continue;
        }
        convolve_axis(&a, dims, axis, &taps, &mut b);
        std::mem::swap(&mut a, &mut b);
    }
    Volume::new(
        dims,
        v.voxel_size(),
        a.into_iter().map(|x| x as f32).collect(),
    )
    .expect("shape preserved")
}

/// Same blur on an f64 field; used by the SSIM window.
pub fn gaussian_blur_3d_f64(src: &[f64], dims: Dims, sigma: f64, truncate: f64) -> Vec<f64> {
    let mut a = src.to_vec();
    let mut b = vec![0.0f64; a.len()];
    let taps = gaussian_kernel(sigma, truncate);
    if taps.len() == 1 {
        return a;
    }
    for axis in 0..3 {
        convolve_axis(&a, dims, axis, &taps, &mut b);
        std::mem::swap(&mut a, &mut b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0, 4.0);
        assert_eq!(k.len(), 17);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..k.len() / 2 {
            assert!((k[i] - k[k.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let v = Volume::<f32>::from_fn(Dims::new(4, 5, 6), [1.0; 3], |_, _, _| 2.5);
        let b = gaussian_blur_3d(&v, [1.0, 1.5, 2.0]);
        for &x in b.data() {
            assert!((x - 2.5).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let v = Volume::<f32>::from_fn(Dims::new(6, 6, 6), [1.0; 3], |z, y, x| {
            ((z * 31 + y * 17 + x * 7) % 13) as f32
        });
        let b = gaussian_blur_3d(&v, [1.2, 1.2, 1.2]);
        assert!((v.mean() - b.mean()).abs() < 1e-4);
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }
}
