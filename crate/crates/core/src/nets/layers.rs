//! Convolution, batch-norm and activation primitives with manual
//! backward passes.
//!
//! The 3x3x3 kernels copy each input channel into a zero-padded slab
//! once, then run full-row fused multiply-adds with no per-element
//! border branches. Reductions use fixed-width lane accumulators so the
//! results are bit-identical regardless of optimization level or thread
//! scheduling.

use super::tensor::Batch;
use crate::scalar::Real;
use crate::volume::Dims;
use rand::Rng;

const LANES: usize = 8;

/// Fixed-order lane-accumulated dot product.
#[inline]
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        let pb = &b[i * LANES..(i + 1) * LANES];
        for j in 0..LANES {
            acc[j] = acc[j] + pa[j] * pb[j];
        }
    }
    let mut s = T::zero();
    for j in 0..LANES {
        s = s + acc[j];
    }
    for i in chunks * LANES..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Lane-accumulated sum.
#[inline]
fn sum_lanes<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        for j in 0..LANES {
            acc[j] = acc[j] + pa[j];
        }
    }
    let mut s = T::zero();
    for j in 0..LANES {
        s = s + acc[j];
    }
    for i in chunks * LANES..a.len() {
        s = s + a[i];
    }
    s
}

/// out[i] += w0*r[i] + w1*r[i+1] + w2*r[i+2] over a full row.
#[inline]
fn row3_acc<T: Real>(out: &mut [T], r: &[T], w0: T, w1: T, w2: T) {
    let n = out.len();
    let (r0, r1, r2) = (&r[0..n], &r[1..n + 1], &r[2..n + 2]);
    for i in 0..n {
        out[i] = out[i] + w0 * r0[i] + w1 * r1[i] + w2 * r2[i];
    }
}

/// Copies one channel slab into a zero-padded (+1 on each side) buffer.
fn pad_channel<T: Real>(src: &[T], d: Dims, dst: &mut [T]) {
    let (py, px) = (d.y + 2, d.x + 2);
    for v in dst.iter_mut() {
        *v = T::zero();
    }
    for z in 0..d.z {
        for y in 0..d.y {
            let s = (z * d.y + y) * d.x;
            let t = ((z + 1) * py + (y + 1)) * px + 1;
            dst[t..t + d.x].copy_from_slice(&src[s..s + d.x]);
        }
    }
}

fn he_uniform<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from64(rng.gen_range(-limit..limit)))
        .collect()
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution, stride 1, zero padding 1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv3<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[oc][ic][dz][dy][dx]` flat.
    pub w: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Conv3Grads<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Conv3<T> {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            w: he_uniform(rng, out_ch * in_ch * 27, in_ch * 27),
            b: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    fn tap(&self, oc: usize, ic: usize) -> &[T] {
        let base = (oc * self.in_ch + ic) * 27;
        &self.w[base..base + 27]
    }

    pub fn forward(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.in_ch);
        let d = x.spatial;
        let (py, px) = (d.y + 2, d.x + 2);
        let mut out = Batch::zeros(x.b, self.out_ch, d);
        let mut pad = vec![T::zero(); (d.z + 2) * py * px];
        for bi in 0..x.b {
            for ic in 0..self.in_ch {
                pad_channel(x.channel(bi, ic), d, &mut pad);
                for oc in 0..self.out_ch {
                    let taps = self.tap(oc, ic);
                    let och = out.channel_mut(bi, oc);
                    for z in 0..d.z {
                        for dz in 0..3 {
                            for dy in 0..3 {
                                let w0 = taps[(dz * 3 + dy) * 3];
                                let w1 = taps[(dz * 3 + dy) * 3 + 1];
                                let w2 = taps[(dz * 3 + dy) * 3 + 2];
                                for y in 0..d.y {
                                    let o = (z * d.y + y) * d.x;
                                    let p = ((z + dz) * py + (y + dy)) * px;
                                    row3_acc(&mut och[o..o + d.x], &pad[p..p + d.x + 2], w0, w1, w2);
                                }
                            }
                        }
                    }
                }
            }
            for oc in 0..self.out_ch {
                let bias = self.b[oc];
                for v in out.channel_mut(bi, oc) {
                    *v = *v + bias;
                }
            }
        }
        out
    }

    /// Returns (grad wrt input, parameter gradients).
    pub fn backward(&self, x_in: &Batch<T>, go: &Batch<T>) -> (Batch<T>, Conv3Grads<T>) {
        assert_eq!(go.c, self.out_ch);
        assert_eq!(x_in.spatial, go.spatial);
        let d = x_in.spatial;
        let (py, px) = (d.y + 2, d.x + 2);

        // grad wrt input: convolution of go with flipped, transposed taps
        let mut gi = Batch::zeros(x_in.b, self.in_ch, d);
        let mut pad = vec![T::zero(); (d.z + 2) * py * px];
        for bi in 0..go.b {
            for oc in 0..self.out_ch {
                pad_channel(go.channel(bi, oc), d, &mut pad);
                for ic in 0..self.in_ch {
                    let taps = self.tap(oc, ic);
                    let gch = gi.channel_mut(bi, ic);
                    for z in 0..d.z {
                        for dz in 0..3 {
                            for dy in 0..3 {
                                // flipped kernel
                                let w0 = taps[((2 - dz) * 3 + (2 - dy)) * 3 + 2];
                                let w1 = taps[((2 - dz) * 3 + (2 - dy)) * 3 + 1];
                                let w2 = taps[((2 - dz) * 3 + (2 - dy)) * 3];
                                for y in 0..d.y {
                                    let o = (z * d.y + y) * d.x;
                                    let p = ((z + dz) * py + (y + dy)) * px;
                                    row3_acc(&mut gch[o..o + d.x], &pad[p..p + d.x + 2], w0, w1, w2);
                                }
                            }
                        }
                    }
                }
            }
        }

        // grad wrt weights: per-tap lane-accumulated dots against the padded input
        let mut gw = vec![T::zero(); self.w.len()];
        for bi in 0..x_in.b {
            for ic in 0..self.in_ch {
                pad_channel(x_in.channel(bi, ic), d, &mut pad);
                for oc in 0..self.out_ch {
                    let och = go.channel(bi, oc);
                    let base = (oc * self.in_ch + ic) * 27;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            let mut acc = [[T::zero(); LANES]; 3];
                            let mut tail = [T::zero(); 3];
                            for z in 0..d.z {
                                for y in 0..d.y {
                                    let o = (z * d.y + y) * d.x;
                                    let p = ((z + dz) * py + (y + dy)) * px;
                                    let go_row = &och[o..o + d.x];
                                    let in_row = &pad[p..p + d.x + 2];
                                    let chunks = d.x / LANES;
                                    for dx in 0..3 {
                                        let r = &in_row[dx..dx + d.x];
                                        let a = &mut acc[dx];
                                        for i in 0..chunks {
                                            let pa = &go_row[i * LANES..(i + 1) * LANES];
                                            let pb = &r[i * LANES..(i + 1) * LANES];
                                            for j in 0..LANES {
                                                a[j] = a[j] + pa[j] * pb[j];
                                            }
                                        }
                                        for i in chunks * LANES..d.x {
                                            tail[dx] = tail[dx] + go_row[i] * r[i];
                                        }
                                    }
                                }
                            }
                            for dx in 0..3 {
                                let mut s = tail[dx];
                                for j in 0..LANES {
                                    s = s + acc[dx][j];
                                }
                                gw[base + (dz * 3 + dy) * 3 + dx] = gw[base + (dz * 3 + dy) * 3 + dx] + s;
                            }
                        }
                    }
                }
            }
        }

        let mut gb = vec![T::zero(); self.out_ch];
        for bi in 0..go.b {
            for oc in 0..self.out_ch {
                gb[oc] = gb[oc] + sum_lanes(go.channel(bi, oc));
            }
        }

        (gi, Conv3Grads { w: gw, b: gb })
    }
}

// ---------------------------------------------------------------------------
// 2x2x2 convolution, stride 2 (downsample)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvDown<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[oc][ic][dz][dy][dx]` flat, 8 taps.
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> ConvDown<T> {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            w: he_uniform(rng, out_ch * in_ch * 8, in_ch * 8),
            b: vec![T::zero(); out_ch],
        }
    }

    pub fn out_dims(d: Dims) -> Dims {
        Dims::new(d.z / 2, d.y / 2, d.x / 2)
    }

    pub fn forward(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.in_ch);
        let d = x.spatial;
        assert!(d.z % 2 == 0 && d.y % 2 == 0 && d.x % 2 == 0);
        let od = Self::out_dims(d);
        let mut out = Batch::zeros(x.b, self.out_ch, od);
        for bi in 0..x.b {
            for oc in 0..self.out_ch {
                let och = out.channel_mut(bi, oc);
                for v in och.iter_mut() {
                    *v = self.b[oc];
                }
                for ic in 0..self.in_ch {
                    let inch = x.channel(bi, ic);
                    let base = (oc * self.in_ch + ic) * 8;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let w = self.w[base + (dz * 2 + dy) * 2 + dx];
                                for z in 0..od.z {
                                    for y in 0..od.y {
                                        let o = (z * od.y + y) * od.x;
                                        let p = ((2 * z + dz) * d.y + 2 * y + dy) * d.x + dx;
                                        let orow = &mut och[o..o + od.x];
                                        let irow = &inch[p..p + 2 * od.x - 1];
                                        for i in 0..od.x {
                                            orow[i] = orow[i] + w * irow[2 * i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x_in: &Batch<T>, go: &Batch<T>) -> (Batch<T>, Conv3Grads<T>) {
        let d = x_in.spatial;
        let od = Self::out_dims(d);
        assert_eq!(go.spatial, od);
        let mut gi = Batch::zeros(x_in.b, self.in_ch, d);
        let mut gw = vec![T::zero(); self.w.len()];
        let mut gb = vec![T::zero(); self.out_ch];
        for bi in 0..x_in.b {
            for oc in 0..self.out_ch {
                let och = go.channel(bi, oc);
                gb[oc] = gb[oc] + sum_lanes(och);
                for ic in 0..self.in_ch {
                    let inch = x_in.channel(bi, ic);
                    let gich = gi.channel_mut(bi, ic);
                    let base = (oc * self.in_ch + ic) * 8;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let wi = base + (dz * 2 + dy) * 2 + dx;
                                let w = self.w[wi];
                                let mut acc = T::zero();
                                for z in 0..od.z {
                                    for y in 0..od.y {
                                        let o = (z * od.y + y) * od.x;
                                        let p = ((2 * z + dz) * d.y + 2 * y + dy) * d.x + dx;
                                        for i in 0..od.x {
                                            let g = och[o + i];
                                            gich[p + 2 * i] = gich[p + 2 * i] + w * g;
                                            acc = acc + g * inch[p + 2 * i];
                                        }
                                    }
                                }
                                gw[wi] = gw[wi] + acc;
                            }
                        }
                    }
                }
            }
        }
        (gi, Conv3Grads { w: gw, b: gb })
    }
}

// ---------------------------------------------------------------------------
// 2x2x2 transposed convolution, stride 2 (upsample)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvUp<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[oc][ic][dz][dy][dx]` flat; tap (dz,dy,dx) feeds output parity
    /// (z%2, y%2, x%2).
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> ConvUp<T> {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            w: he_uniform(rng, out_ch * in_ch * 8, in_ch),
            b: vec![T::zero(); out_ch],
        }
    }

    pub fn out_dims(d: Dims) -> Dims {
        Dims::new(d.z * 2, d.y * 2, d.x * 2)
    }

    pub fn forward(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.in_ch);
        let d = x.spatial;
        let od = Self::out_dims(d);
        let mut out = Batch::zeros(x.b, self.out_ch, od);
        for bi in 0..x.b {
            for oc in 0..self.out_ch {
                let och = out.channel_mut(bi, oc);
                for v in och.iter_mut() {
                    *v = self.b[oc];
                }
                for ic in 0..self.in_ch {
                    let inch = x.channel(bi, ic);
                    let base = (oc * self.in_ch + ic) * 8;
                    for zo in 0..od.z {
                        let (z, dz) = (zo / 2, zo % 2);
                        for yo in 0..od.y {
                            let (y, dy) = (yo / 2, yo % 2);
                            let we = self.w[base + (dz * 2 + dy) * 2];
                            let wo = self.w[base + (dz * 2 + dy) * 2 + 1];
                            let o = (zo * od.y + yo) * od.x;
                            let p = (z * d.y + y) * d.x;
                            let orow = &mut och[o..o + od.x];
                            let irow = &inch[p..p + d.x];
                            for (pair, &iv) in orow.chunks_exact_mut(2).zip(irow) {
                                pair[0] = pair[0] + we * iv;
                                pair[1] = pair[1] + wo * iv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x_in: &Batch<T>, go: &Batch<T>) -> (Batch<T>, Conv3Grads<T>) {
        let d = x_in.spatial;
        let od = Self::out_dims(d);
        assert_eq!(go.spatial, od);
        let mut gi = Batch::zeros(x_in.b, self.in_ch, d);
        let mut gw = vec![T::zero(); self.w.len()];
        let mut gb = vec![T::zero(); self.out_ch];
        for bi in 0..x_in.b {
            for oc in 0..self.out_ch {
                let och = go.channel(bi, oc);
                gb[oc] = gb[oc] + sum_lanes(och);
                for ic in 0..self.in_ch {
                    let inch = x_in.channel(bi, ic);
                    let gich = gi.channel_mut(bi, ic);
                    let base = (oc * self.in_ch + ic) * 8;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let wi = base + (dz * 2 + dy) * 2 + dx;
                                let w = self.w[wi];
                                let mut acc = T::zero();
                                for z in 0..d.z {
                                    for y in 0..d.y {
                                        let p = (z * d.y + y) * d.x;
                                        let o = ((2 * z + dz) * od.y + 2 * y + dy) * od.x + dx;
                                        for i in 0..d.x {
                                            let g = och[o + 2 * i];
                                            gich[p + i] = gich[p + i] + w * g;
                                            acc = acc + g * inch[p + i];
                                        }
                                    }
                                }
                                gw[wi] = gw[wi] + acc;
                            }
                        }
                    }
                }
            }
        }
        (gi, Conv3Grads { w: gw, b: gb })
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Batch<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward with batch statistics. Pure: running
    /// statistics are only changed by [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Batch<T>) -> (Batch<T>, BnCache<T>) {
        let c = self.channels();
        assert_eq!(x.c, c);
        let n = (x.b * x.spatial.len()) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut s = 0.0f64;
            for bi in 0..x.b {
                for &v in x.channel(bi, ci) {
                    s += v.to64();
                }
            }
            let m = s / n;
            let mut ss = 0.0f64;
            for bi in 0..x.b {
                for &v in x.channel(bi, ci) {
                    let d = v.to64() - m;
                    ss += d * d;
                }
            }
            mean[ci] = m;
            var[ci] = ss / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Batch::zeros(x.b, c, x.spatial);
        let mut out = Batch::zeros(x.b, c, x.spatial);
        for bi in 0..x.b {
            for ci in 0..c {
                let m = T::from64(mean[ci]);
                let istd = T::from64(inv_std[ci]);
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let src = x.channel(bi, ci);
                let xh = xhat.channel_mut(bi, ci);
                for i in 0..src.len() {
                    xh[i] = (src[i] - m) * istd;
                }
                let oc = out.channel_mut(bi, ci);
                for i in 0..src.len() {
                    oc[i] = g * xh[i] + b;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Inference-mode forward with running statistics.
    pub fn forward_eval(&self, x: &Batch<T>) -> Batch<T> {
        let c = self.channels();
        assert_eq!(x.c, c);
        let mut out = Batch::zeros(x.b, c, x.spatial);
        for bi in 0..x.b {
            for ci in 0..c {
                let istd = T::from64(1.0 / (self.running_var[ci].to64() + self.eps).sqrt());
                let m = self.running_mean[ci];
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let src = x.channel(bi, ci);
                let oc = out.channel_mut(bi, ci);
                for i in 0..src.len() {
                    oc[i] = g * (src[i] - m) * istd + b;
                }
            }
        }
        out
    }

    /// Folds the cached batch statistics into the running averages.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        for ci in 0..self.channels() {
            let rm = self.running_mean[ci].to64();
            let rv = self.running_var[ci].to64();
            self.running_mean[ci] =
                T::from64(rm * (1.0 - self.momentum) + cache.mean[ci] * self.momentum);
            self.running_var[ci] =
                T::from64(rv * (1.0 - self.momentum) + cache.var[ci] * self.momentum);
        }
    }

    /// Backward through training-mode normalization (batch statistics).
    pub fn backward(&self, cache: &BnCache<T>, go: &Batch<T>) -> (Batch<T>, BnGrads<T>) {
        let c = self.channels();
        assert_eq!(go.c, c);
        let n = (go.b * go.spatial.len()) as f64;
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut gi = Batch::zeros(go.b, c, go.spatial);
        for ci in 0..c {
            // reductions in f64 for stability; fixed order
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for bi in 0..go.b {
                let g = go.channel(bi, ci);
                let xh = cache.xhat.channel(bi, ci);
                for i in 0..g.len() {
                    let dy = g[i].to64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh[i].to64();
                }
            }
            ggamma[ci] = T::from64(sum_dy_xhat);
            gbeta[ci] = T::from64(sum_dy);
            let gamma = self.gamma[ci].to64();
            let istd = cache.inv_std[ci];
            let k1 = gamma * istd;
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            for bi in 0..go.b {
                let g = go.channel(bi, ci);
                let xh = cache.xhat.channel(bi, ci);
                let gich = gi.channel_mut(bi, ci);
                for i in 0..g.len() {
                    let dy = g[i].to64();
                    let v = k1 * (dy - mean_dy - xh[i].to64() * mean_dy_xhat);
                    gich[i] = T::from64(v);
                }
            }
        }
        (
            gi,
            BnGrads {
                gamma: ggamma,
                beta: gbeta,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward<T: Real>(x: &Batch<T>) -> Batch<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Backward using the forward output's sign (zero sub-gradient at 0).
pub fn relu_backward<T: Real>(out: &Batch<T>, go: &Batch<T>) -> Batch<T> {
    let mut gi = go.clone();
    for (g, &o) in gi.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    gi
}
