//! Foreground-aware training objectives.
//!
//! Three pieces: a masked mean squared error restricted to foreground
//! voxels, a Dice loss computed between the binary foreground mask and a
//! soft-thresholded prediction, and their weighted combination. Every
//! loss returns the scalar value together with the analytic gradient with
//! respect to the prediction; reductions accumulate in f64 regardless of
//! the storage precision.
//!
//! The soft threshold is the normalized tunable sigmoid
//! `sigma_k(x) = (x - k*x) / (k - 2*k*|x| + 1)`: odd, strictly
//! increasing, fixed points at 0 and +-1, with sharpness controlled by
//! `k` in (-1, 0].

use crate::scalar::Real;
use crate::volume::{Dims, MaskVolume, Volume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty mask: loss needs at least one foreground voxel")]
    EmptyMask,
    #[error("shape mismatch: {a} vs {b}")]
    ShapeMismatch { a: Dims, b: Dims },
    #[error("invalid sharpness k={0}: expected k in (-1, 0]")]
    InvalidSharpness(f64),
}

/// Weights and stabilizers for the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the masked MSE term, in [0, 1].
    pub lambda: f64,
    /// Soft-threshold sharpness, in (-1, 0].
    pub k: f64,
    /// Dice denominator stabilizer.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            k: -0.95,
            epsilon: 1e-6,
        }
    }
}

/// Scalar loss value plus gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossResult<T = f32> {
    pub value: f64,
    pub grad: Volume<T>,
}

fn check_k(k: f64) -> Result<(), LossError> {
    if k > -1.0 && k <= 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidSharpness(k))
    }
}

fn check_shapes(a: Dims, b: Dims) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch { a, b })
    }
}

/// `sigma_k(x)` for a single value. For k in (-1, 0] the denominator
/// `k - 2k|x| + 1 = (1 + k) + 2|k||x|` is strictly positive for all x.
#[inline]
pub fn soft_threshold_scalar(x: f64, k: f64) -> f64 {
    (x - k * x) / (k - 2.0 * k * x.abs() + 1.0)
}

/// Closed-form derivative `sigma_k'(x) = (1 - k^2) / (k - 2k|x| + 1)^2`.
#[inline]
pub fn soft_threshold_deriv(x: f64, k: f64) -> f64 {
    let den = k - 2.0 * k * x.abs() + 1.0;
    (1.0 - k * k) / (den * den)
}

/// Elementwise `sigma_k` over a volume.
pub fn soft_threshold<T: Real>(v: &Volume<T>, k: f64) -> Result<Volume<T>, LossError> {
    check_k(k)?;
    Ok(v.map(|x| T::from64(soft_threshold_scalar(x.to64(), k))))
}

/// Mean squared error over mask voxels only. The gradient is exactly
/// zero outside the mask.
pub fn masked_mse<T: Real>(
    pred: &Volume<T>,
    target: &Volume<T>,
    m: &MaskVolume,
) -> Result<LossResult<T>, LossError> {
    check_shapes(pred.dims(), target.dims())?;
    check_shapes(pred.dims(), m.dims())?;
    let n_fg = m.count_ones();
    if n_fg == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / n_fg as f64;
    let mut value = 0.0f64;
    let mut grad = vec![T::zero(); pred.data().len()];
    for i in 0..grad.len() {
        if m.bits()[i] {
            let d = pred.data()[i].to64() - target.data()[i].to64();
            value += d * d;
            grad[i] = T::from64(2.0 * inv * d);
        }
    }
    Ok(LossResult {
        value: value * inv,
        grad: Volume::new(pred.dims(), pred.voxel_size(), grad).expect("shape matches"),
    })
}

/// Dice loss between the rectified soft-thresholded prediction and the
/// binary foreground mask.
///
/// With `s = max(sigma_k(pred), 0)` elementwise, the value is
/// `1 - 2*sum(s*M) / (sum(s) + sum(M) + eps)`, always in [0, 1]. The
/// gradient chains through the rectification (zero sub-gradient where
/// `sigma_k(pred) <= 0`) and the sigmoid.
pub fn dice_loss<T: Real>(
    pred: &Volume<T>,
    m: &MaskVolume,
    cfg: &LossConfig,
) -> Result<LossResult<T>, LossError> {
    check_k(cfg.k)?;
    check_shapes(pred.dims(), m.dims())?;
    let n_fg = m.count_ones();
    if n_fg == 0 {
        return Err(LossError::EmptyMask);
    }

    let n = pred.data().len();
    let mut soft = vec![0.0f64; n];
    let mut sum_s = 0.0f64;
    let mut overlap = 0.0f64;
    for i in 0..n {
        let s = soft_threshold_scalar(pred.data()[i].to64(), cfg.k).max(0.0);
        soft[i] = s;
        sum_s += s;
        if m.bits()[i] {
            overlap += s;
        }
    }
    let denom = sum_s + n_fg as f64 + cfg.epsilon;
    let value = 1.0 - 2.0 * overlap / denom;

    // d value / d s_i = -2*M_i/denom + 2*overlap/denom^2
    let common = 2.0 * overlap / (denom * denom);
    let mut grad = vec![T::zero(); n];
    for i in 0..n {
        if soft[i] > 0.0 {
            let dv_ds = common - if m.bits()[i] { 2.0 / denom } else { 0.0 };
            grad[i] = T::from64(dv_ds * soft_threshold_deriv(pred.data()[i].to64(), cfg.k));
        }
    }
    Ok(LossResult {
        value,
        grad: Volume::new(pred.dims(), pred.voxel_size(), grad).expect("shape matches"),
    })
}

/// Weighted combination `lambda * MMSE + (1 - lambda) * Dice`; the
/// gradient is the same affine combination of component gradients.
pub fn spotlight_loss<T: Real>(
    pred: &Volume<T>,
    target: &Volume<T>,
    m: &MaskVolume,
    cfg: &LossConfig,
) -> Result<LossResult<T>, LossError> {
    let mmse = masked_mse(pred, target, m)?;
    let dice = dice_loss(pred, m, cfg)?;
    let l = cfg.lambda;
    let mut grad = mmse.grad;
    for (g, d) in grad.data_mut().iter_mut().zip(dice.grad.data()) {
        *g = T::from64(l * g.to64() + (1.0 - l) * d.to64());
    }
    Ok(LossResult {
        value: l * mmse.value + (1.0 - l) * dice.value,
        grad,
    })
}

/// Unmasked mean squared error over every voxel; the baseline objective.
pub fn plain_mse<T: Real>(
    pred: &Volume<T>,
    target: &Volume<T>,
) -> Result<LossResult<T>, LossError> {
    check_shapes(pred.dims(), target.dims())?;
    let n = pred.data().len() as f64;
    let mut value = 0.0f64;
    let mut grad = vec![T::zero(); pred.data().len()];
    for i in 0..grad.len() {
        let d = pred.data()[i].to64() - target.data()[i].to64();
        value += d * d;
        grad[i] = T::from64(2.0 * d / n);
    }
    Ok(LossResult {
        value: value / n,
        grad: Volume::new(pred.dims(), pred.voxel_size(), grad).expect("shape matches"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn vol(values: &[f64]) -> Volume<f64> {
        Volume::new(Dims::new(1, 1, values.len()), [1.0; 3], values.to_vec()).unwrap()
    }

    fn mask(bits: &[bool]) -> MaskVolume {
        MaskVolume::new(Dims::new(1, 1, bits.len()), bits.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_fixed_points() {
        for &k in &[-0.95, -0.5, -0.01, 0.0] {
            assert_eq!(soft_threshold_scalar(0.0, k), 0.0);
            assert!((soft_threshold_scalar(1.0, k) - 1.0).abs() < 1e-15);
            assert!((soft_threshold_scalar(-1.0, k) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_worked_values() {
        // numerator 0.5 + 0.475 = 0.975, denominator -0.95 + 0.95 + 1 = 1
        assert!((soft_threshold_scalar(0.5, -0.95) - 0.975).abs() < 1e-15);
        // slope at zero: (1 - k) / (1 + k) = 39 for k = -0.95
        assert!((soft_threshold_deriv(0.0, -0.95) - 39.0).abs() < 1e-10);
    }

    #[test]
    fn sigmoid_odd_increasing_bounded() {
        let k = -0.95;
        let bound = (1.0 - k) / (-2.0 * k);
        let mut prev = f64::NEG_INFINITY;
        for i in -100..=100 {
            let x = i as f64 * 0.37;
            let s = soft_threshold_scalar(x, k);
            assert!((s + soft_threshold_scalar(-x, k)).abs() < 1e-12);
            assert!(s > prev);
            assert!(s.abs() < bound);
            prev = s;
        }
        assert!((bound - 1.0263157894736843).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_derivative_matches_finite_difference() {
        let k = -0.6;
        let h = 1e-6;
        for i in 1..50 {
            let x = i as f64 * 0.11 - 2.0;
            if x.abs() < 1e-3 {
                continue; // |x| kink of the abs in the denominator
            }
            let fd = (soft_threshold_scalar(x + h, k) - soft_threshold_scalar(x - h, k)) / (2.0 * h);
            assert!(
                (fd - soft_threshold_deriv(x, k)).abs() < 1e-7,
                "x={x}"
            );
        }
    }

    #[test]
    fn invalid_sharpness_rejected() {
        let v = vol(&[0.0, 1.0]);
        assert!(matches!(
            soft_threshold(&v, 0.5),
            Err(LossError::InvalidSharpness(_))
        ));
        assert!(soft_threshold(&v, -1.0).is_err());
        assert!(soft_threshold(&v, 0.0).is_ok());
    }

    #[test]
    fn mmse_identity_is_zero() {
        let p = vol(&[1.0, 2.0, 3.0, 4.0]);
        let m = mask(&[true, true, false, true]);
        let r = masked_mse(&p, &p, &m).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mmse_single_voxel() {
        let p = vol(&[5.0, 0.0]);
        let t = vol(&[2.0, 7.0]);
        let m = mask(&[true, false]);
        let r = masked_mse(&p, &t, &m).unwrap();
        assert!((r.value - 9.0).abs() < 1e-12);
        assert!((r.grad.data()[0] - 6.0).abs() < 1e-12);
        assert_eq!(r.grad.data()[1], 0.0);
    }

    #[test]
    fn mmse_ignores_background() {
        // difference 1 on mask, 5 off mask: value must be 1
        let p = vol(&[1.0, 1.0, 5.0, 5.0]);
        let t = vol(&[0.0, 0.0, 0.0, 0.0]);
        let m = mask(&[true, true, false, false]);
        let r = masked_mse(&p, &t, &m).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        // and is invariant to arbitrary off-mask changes
        let p2 = vol(&[1.0, 1.0, -40.0, 99.0]);
        let r2 = masked_mse(&p2, &t, &m).unwrap();
        assert_eq!(r.value, r2.value);
        assert_eq!(r.grad.data(), r2.grad.data());
    }

    #[test]
    fn mmse_errors() {
        let p = vol(&[1.0, 2.0]);
        assert!(matches!(
            masked_mse(&p, &p, &mask(&[false, false])),
            Err(LossError::EmptyMask)
        ));
        let q = vol(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            masked_mse(&p, &q, &mask(&[true, true])),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dice_perfect_prediction_is_near_zero() {
        let p = vol(&[1.0, 1.0, 0.0, 0.0]);
        let m = mask(&[true, true, false, false]);
        let cfg = LossConfig::default();
        let r = dice_loss(&p, &m, &cfg).unwrap();
        // 1 - 2*2/(2 + 2 + eps) ~ eps / (4 + eps)
        assert!(r.value > 0.0 && r.value < 1e-6);
    }

    #[test]
    fn dice_zero_prediction_is_one() {
        let p = vol(&[0.0; 6]);
        let m = mask(&[true, false, true, false, true, false]);
        let r = dice_loss(&p, &m, &LossConfig::default()).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn dice_all_ones_half_mask_is_one_third() {
        let n = 64;
        let p = vol(&vec![1.0; n]);
        let bits: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        let m = mask(&bits);
        let r = dice_loss(&p, &m, &LossConfig::default()).unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-7, "value {}", r.value);
    }

    #[test]
    fn dice_value_in_unit_interval() {
        let cfg = LossConfig::default();
        for seed in 0..20u64 {
            let vals: Vec<f64> = (0..48)
                .map(|i| (((seed * 7919 + i * 104729) % 1000) as f64 / 500.0) - 1.0)
                .collect();
            let bits: Vec<bool> = (0..48).map(|i| (seed + i) % 3 == 0).collect();
            if !bits.iter().any(|&b| b) {
                continue;
            }
            let r = dice_loss(&vol(&vals), &mask(&bits), &cfg).unwrap();
            assert!(r.value >= 0.0 && r.value <= 1.0);
        }
    }

    #[test]
    fn spotlight_degenerate_weights() {
        let p = vol(&[0.3, -0.2, 0.9, 0.1]);
        let t = vol(&[0.5, 0.0, 1.0, 0.0]);
        let m = mask(&[true, false, true, true]);
        let mut cfg = LossConfig::default();

        cfg.lambda = 1.0;
        let s = spotlight_loss(&p, &t, &m, &cfg).unwrap();
        let mm = masked_mse(&p, &t, &m).unwrap();
        assert_eq!(s.value, mm.value);
        assert_eq!(s.grad.data(), mm.grad.data());

        cfg.lambda = 0.0;
        let s = spotlight_loss(&p, &t, &m, &cfg).unwrap();
        let d = dice_loss(&p, &m, &cfg).unwrap();
        assert_eq!(s.value, d.value);
        assert_eq!(s.grad.data(), d.grad.data());
    }

    #[test]
    fn spotlight_affine_combination() {
        let p = vol(&[0.3, -0.2, 0.9, 0.1]);
        let t = vol(&[0.5, 0.0, 1.0, 0.0]);
        let m = mask(&[true, false, true, true]);
        let cfg = LossConfig {
            lambda: 0.5,
            ..Default::default()
        };
        let s = spotlight_loss(&p, &t, &m, &cfg).unwrap();
        let mm = masked_mse(&p, &t, &m).unwrap();
        let d = dice_loss(&p, &m, &cfg).unwrap();
        assert!((s.value - (0.5 * mm.value + 0.5 * d.value)).abs() < 1e-15);
    }

    #[test]
    fn spotlight_continuous_in_config() {
        let p = vol(&[0.4, -0.6, 1.2, 0.05, -0.3, 0.8]);
        let t = vol(&[0.5, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let m = mask(&[true, false, true, false, false, true]);
        let base = LossConfig::default();
        let v0 = spotlight_loss(&p, &t, &m, &base).unwrap().value;
        for d in [1e-6, 1e-5] {
            let cfg = LossConfig {
                lambda: base.lambda + d,
                k: base.k + d,
                epsilon: base.epsilon + d,
            };
            let v1 = spotlight_loss(&p, &t, &m, &cfg).unwrap().value;
            assert!((v0 - v1).abs() < 50.0 * d);
        }
    }

    /// Central finite differences of a scalar loss with respect to each
    /// prediction voxel; independent of the analytic gradient path.
    fn finite_difference_grad(
        pred: &Volume<f64>,
        loss: impl Fn(&Volume<f64>) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut g = Vec::with_capacity(pred.data().len());
        for i in 0..pred.data().len() {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            g.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        g
    }

    /// Per-voxel comparison at relative tolerance `tol`. The absolute term
    /// is scaled by the gradient's own infinity norm so that voxels whose
    /// finite difference straddles the sigmoid's high-curvature zone do not
    /// produce spurious failures; a wrong gradient at any voxel that
    /// matters still exceeds both terms.
    fn assert_grad_close(analytic: &[f64], fd: &[f64], tol: f64) {
        let scale = analytic
            .iter()
            .chain(fd)
            .fold(1e-12f64, |m, &g| m.max(g.abs()));
        for (i, (&a, &b)) in analytic.iter().zip(fd).enumerate() {
            let err = (a - b).abs();
            let bound = tol * a.abs().max(b.abs()) + tol * scale;
            assert!(
                err <= bound,
                "voxel {i}: analytic {a} vs fd {b} (err {err}, bound {bound})"
            );
        }
    }

    fn pseudo_random_volume(seed: u64, dims: Dims, lo: f64, hi: f64) -> Volume<f64> {
        // splitmix64 stream; test-only independence from the rand crate
        let mut state = seed.wrapping_add(0x9E3779B97F4A7C15);
        let mut next = move || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z = z ^ (z >> 31);
            (z >> 11) as f64 / (1u64 << 53) as f64
        };
        let data: Vec<f64> = (0..dims.len()).map(|_| lo + (hi - lo) * next()).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = Dims::new(4, 6, 6);
        let cfg = LossConfig::default();
        let h = 1e-4;
        for seed in 0..5u64 {
            let pred = pseudo_random_volume(seed, dims, -1.5, 1.5);
            let target = pseudo_random_volume(seed + 100, dims, -1.0, 2.0);
            let bits: Vec<bool> = pseudo_random_volume(seed + 200, dims, 0.0, 1.0)
                .data()
                .iter()
                .map(|&v| v > 0.5)
                .collect();
            let m = MaskVolume::new(dims, bits).unwrap();

            // exclude voxels near the rectification kink from the check
            let keep: Vec<bool> = pred
                .data()
                .iter()
                .map(|&x| soft_threshold_scalar(x, cfg.k).abs() >= 1e-6)
                .collect();

            let an = masked_mse(&pred, &target, &m).unwrap();
            let fd = finite_difference_grad(&pred, |p| masked_mse(p, &target, &m).unwrap().value, h);
            assert_grad_close(an.grad.data(), &fd, 1e-5);

            let an = dice_loss(&pred, &m, &cfg).unwrap();
            let fd = finite_difference_grad(&pred, |p| dice_loss(p, &m, &cfg).unwrap().value, h);
            let ga: Vec<f64> = an
                .grad
                .data()
                .iter()
                .zip(&keep)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect();
            let gf: Vec<f64> = fd
                .iter()
                .zip(&keep)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect();
            assert_grad_close(&ga, &gf, 1e-5);

            let an = spotlight_loss(&pred, &target, &m, &cfg).unwrap();
            let fd = finite_difference_grad(&pred, |p| {
                spotlight_loss(p, &target, &m, &cfg).unwrap().value
            }, h);
            let ga: Vec<f64> = an
                .grad
                .data()
                .iter()
                .zip(&keep)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect();
            let gf: Vec<f64> = fd
                .iter()
                .zip(&keep)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect();
            assert_grad_close(&ga, &gf, 1e-5);

            let an = plain_mse(&pred, &target).unwrap();
            let fd = finite_difference_grad(&pred, |p| plain_mse(p, &target).unwrap().value, h);
            assert_grad_close(an.grad.data(), &fd, 1e-5);
        }
    }
}
