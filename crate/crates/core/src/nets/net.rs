//! Network assembly: encoder levels with skip connections, bottom block,
//! decoder levels, linear output convolution.

use super::layers::{
    relu_backward, relu_forward, BatchNorm, BnCache, Conv3, ConvDown, ConvUp,
};
use super::tensor::Batch;
use super::{NetConfig, NetError};
use crate::scalar::Real;
use rand::Rng;

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv3<T>,
    bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    x_in: Batch<T>,
    bn: BnCache<T>,
    out: Batch<T>,
}

impl<T: Real> ConvBlock<T> {
    fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv3::init(in_ch, out_ch, rng),
            bn: BatchNorm::new(out_ch),
        }
    }

    fn forward_train(&self, x: &Batch<T>) -> (Batch<T>, BlockCache<T>) {
        let pre = self.conv.forward(x);
        let (normed, bn) = self.bn.forward_train(&pre);
        let out = relu_forward(&normed);
        (
            out.clone(),
            BlockCache {
                x_in: x.clone(),
                bn,
                out,
            },
        )
    }

    fn forward_eval(&self, x: &Batch<T>) -> Batch<T> {
        relu_forward(&self.bn.forward_eval(&self.conv.forward(x)))
    }

    /// Returns (grad wrt input, conv w grad, conv b grad, gamma, beta).
    fn backward(
        &self,
        cache: &BlockCache<T>,
        go: &Batch<T>,
    ) -> (Batch<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let g_relu = relu_backward(&cache.out, go);
        let (g_pre, bn_grads) = self.bn.backward(&cache.bn, &g_relu);
        let (gi, conv_grads) = self.conv.backward(&cache.x_in, &g_pre);
        (gi, conv_grads.w, conv_grads.b, bn_grads.gamma, bn_grads.beta)
    }
}

/// Miniature encoder-decoder regressor (1 input channel, 1 output).
#[derive(Debug, Clone)]
pub struct MiniUnet<T> {
    pub cfg: NetConfig,
    enc_pre: Vec<ConvBlock<T>>,
    enc_down: Vec<(ConvDown<T>, BatchNorm<T>)>,
    bottom: ConvBlock<T>,
    dec_up: Vec<(ConvUp<T>, BatchNorm<T>)>,
    dec_fuse: Vec<ConvBlock<T>>,
    out: Conv3<T>,
}

/// Every intermediate needed by the backward pass.
pub struct NetCache<T> {
    input_spatial: crate::volume::Dims,
    enc_pre: Vec<BlockCache<T>>,
    enc_down: Vec<(Batch<T>, BnCache<T>, Batch<T>)>, // (input, bn cache, post-relu)
    bottom: BlockCache<T>,
    dec_up: Vec<(Batch<T>, BnCache<T>, Batch<T>)>,
    dec_fuse: Vec<BlockCache<T>>,
    out_in: Batch<T>,
}

/// Parameter gradients in the network's parameter visitation order.
#[derive(Debug, Clone)]
pub struct NetGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> MiniUnet<T> {
    pub fn init(cfg: NetConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.base_channels >= 1 && cfg.depth >= 1);
        let c = cfg.base_channels;
        let mut enc_pre = Vec::new();
        let mut enc_down = Vec::new();
        for l in 0..cfg.depth {
            let in_ch = if l == 0 { 1 } else { c << (l - 1) };
            enc_pre.push(ConvBlock::init(in_ch, c << l, rng));
            enc_down.push((
                ConvDown::init(c << l, c << (l + 1), rng),
                BatchNorm::new(c << (l + 1)),
            ));
        }
        let bottom = ConvBlock::init(c << cfg.depth, c << cfg.depth, rng);
        let mut dec_up = Vec::new();
        let mut dec_fuse = Vec::new();
        for l in 0..cfg.depth {
            dec_up.push((
                ConvUp::init(c << (l + 1), c << l, rng),
                BatchNorm::new(c << l),
            ));
            dec_fuse.push(ConvBlock::init(2 * (c << l), c << l, rng));
        }
        let out = Conv3::init(c, 1, rng);
        Self {
            cfg,
            enc_pre,
            enc_down,
            bottom,
            dec_up,
            dec_fuse,
            out,
        }
    }

    fn check_input(&self, x: &Batch<T>) -> Result<(), NetError> {
        let m = self.cfg.divisor();
        let d = x.spatial;
        if x.c != 1 {
            return Err(NetError::ShapeMismatch(format!(
                "expected 1 input channel, got {}",
                x.c
            )));
        }
        if d.z % m != 0 || d.y % m != 0 || d.x % m != 0 {
            return Err(NetError::ShapeMismatch(format!(
                "spatial dims {d} not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// Training-mode forward (batch statistics); returns the prediction
    /// and the cache for [`MiniUnet::backward`].
    pub fn forward_train(&self, x: &Batch<T>) -> Result<(Batch<T>, NetCache<T>), NetError> {
        self.check_input(x)?;
        let mut enc_pre_c = Vec::new();
        let mut enc_down_c = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for l in 0..self.cfg.depth {
            let (out, cache) = self.enc_pre[l].forward_train(&cur);
            enc_pre_c.push(cache);
            skips.push(out.clone());
            let (down, bn) = &self.enc_down[l];
            let pre = down.forward(&out);
            let (normed, bnc) = bn.forward_train(&pre);
            let post = relu_forward(&normed);
            enc_down_c.push((out, bnc, post.clone()));
            cur = post;
        }
        let (bottom_out, bottom_c) = self.bottom.forward_train(&cur);
        cur = bottom_out;
        let mut dec_up_c = Vec::new();
        let mut dec_fuse_c = Vec::new();
        for l in (0..self.cfg.depth).rev() {
            let (up, bn) = &self.dec_up[l];
            let pre = up.forward(&cur);
            let (normed, bnc) = bn.forward_train(&pre);
            let post = relu_forward(&normed);
            dec_up_c.push((cur.clone(), bnc, post.clone()));
            let cat = Batch::concat_channels(&post, &skips[l]);
            let (fused, cache) = self.dec_fuse[l].forward_train(&cat);
            dec_fuse_c.push(cache);
            cur = fused;
        }
        let pred = self.out.forward(&cur);
        Ok((
            pred,
            NetCache {
                input_spatial: x.spatial,
                enc_pre: enc_pre_c,
                enc_down: enc_down_c,
                bottom: bottom_c,
                dec_up: dec_up_c,
                dec_fuse: dec_fuse_c,
                out_in: cur,
            },
        ))
    }

    /// Inference-mode forward (running statistics), no cache.
    pub fn forward_eval(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        self.check_input(x)?;
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for l in 0..self.cfg.depth {
            let out = self.enc_pre[l].forward_eval(&cur);
            skips.push(out.clone());
            let (down, bn) = &self.enc_down[l];
            cur = relu_forward(&bn.forward_eval(&down.forward(&out)));
        }
        cur = self.bottom.forward_eval(&cur);
        for l in (0..self.cfg.depth).rev() {
            let (up, bn) = &self.dec_up[l];
            let post = relu_forward(&bn.forward_eval(&up.forward(&cur)));
            let cat = Batch::concat_channels(&post, &skips[l]);
            cur = self.dec_fuse[l].forward_eval(&cat);
        }
        Ok(self.out.forward(&cur))
    }

    /// Reverse-mode pass; returns gradients for every parameter in the
    /// same order as [`MiniUnet::visit_params`].
    pub fn backward(&self, cache: &NetCache<T>, grad_pred: &Batch<T>) -> Result<NetGrads<T>, NetError> {
        if grad_pred.spatial != cache.input_spatial {
            return Err(NetError::InvalidCache(format!(
                "gradient shape {} does not match cached input {}",
                grad_pred.spatial, cache.input_spatial
            )));
        }
        let d = self.cfg.depth;
        // gradient tensors per layer, filled as we walk backwards
        let (mut g_cur, out_gw) = self.out.backward(&cache.out_in, grad_pred);

        let mut fuse_grads = vec![None; d];
        let mut up_grads = vec![None; d];
        let mut skip_grads: Vec<Option<Batch<T>>> = vec![None; d];
        // decoder caches were pushed deepest-first
        for (i, l) in (0..d).rev().enumerate() {
            let fuse_cache = &cache.dec_fuse[i];
            let (g_cat, fw, fb, fg, fbeta) = self.dec_fuse[l].backward(fuse_cache, &g_cur);
            let up_out_ch = self.dec_up[l].0.out_ch;
            let (g_up_post, g_skip) = g_cat.split_channels(up_out_ch);
            skip_grads[l] = Some(g_skip);
            let (up_in, bnc, post) = &cache.dec_up[i];
            let g_relu = relu_backward(post, &g_up_post);
            let (g_pre, bn_grads) = self.dec_up[l].1.backward(bnc, &g_relu);
            let (g_in, up_w) = self.dec_up[l].0.backward(up_in, &g_pre);
            fuse_grads[l] = Some((fw, fb, fg, fbeta));
            up_grads[l] = Some((up_w.w, up_w.b, bn_grads.gamma, bn_grads.beta));
            g_cur = g_in;
        }

        let (g_bottom_in, bw, bb, bg, bbeta) = self.bottom.backward(&cache.bottom, &g_cur);
        g_cur = g_bottom_in;

        let mut pre_grads = vec![None; d];
        let mut down_grads = vec![None; d];
        for l in (0..d).rev() {
            let (down_in, bnc, post) = &cache.enc_down[l];
            let g_relu = relu_backward(post, &g_cur);
            let (g_pre, bn_grads) = self.enc_down[l].1.backward(bnc, &g_relu);
            let (mut g_in, dw) = self.enc_down[l].0.backward(down_in, &g_pre);
            down_grads[l] = Some((dw.w, dw.b, bn_grads.gamma, bn_grads.beta));
            // skip connection joins here
            if let Some(gs) = &skip_grads[l] {
                for (a, &b) in g_in.data_mut().iter_mut().zip(gs.data()) {
                    *a = *a + b;
                }
            }
            let (g_block_in, pw, pb, pg, pbeta) =
                self.enc_pre[l].backward(&cache.enc_pre[l], &g_in);
            pre_grads[l] = Some((pw, pb, pg, pbeta));
            g_cur = g_block_in;
        }

        // assemble in visitation order
        let mut tensors = Vec::new();
        for l in 0..d {
            let (pw, pb, pg, pbeta) = pre_grads[l].take().unwrap();
            tensors.extend([pw, pb, pg, pbeta]);
            let (dw, db, dg, dbeta) = down_grads[l].take().unwrap();
            tensors.extend([dw, db, dg, dbeta]);
        }
        tensors.extend([bw, bb, bg, bbeta]);
        for l in (0..d).rev() {
            let (uw, ub, ug, ubeta) = up_grads[l].take().unwrap();
            tensors.extend([uw, ub, ug, ubeta]);
            let (fw, fb, fg, fbeta) = fuse_grads[l].take().unwrap();
            tensors.extend([fw, fb, fg, fbeta]);
        }
        tensors.push(out_gw.w);
        tensors.push(out_gw.b);
        Ok(NetGrads { tensors })
    }

    /// Folds the cached batch statistics of one training step into every
    /// batch-norm layer's running averages.
    pub fn update_running_stats(&mut self, cache: &NetCache<T>) {
        let d = self.cfg.depth;
        for l in 0..d {
            self.enc_pre[l].bn.update_running(&cache.enc_pre[l].bn);
            self.enc_down[l].1.update_running(&cache.enc_down[l].1);
        }
        self.bottom.bn.update_running(&cache.bottom.bn);
        for (i, l) in (0..d).rev().enumerate() {
            self.dec_up[l].1.update_running(&cache.dec_up[i].1);
            self.dec_fuse[l].bn.update_running(&cache.dec_fuse[i].bn);
        }
    }

    /// Visits every learnable parameter tensor in a fixed order
    /// (matched by [`MiniUnet::backward`], Adam state and checkpoints).
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a Vec<T>)) {
        for l in 0..self.cfg.depth {
            f(format!("enc{l}.pre.w"), &self.enc_pre[l].conv.w);
            f(format!("enc{l}.pre.b"), &self.enc_pre[l].conv.b);
            f(format!("enc{l}.pre.gamma"), &self.enc_pre[l].bn.gamma);
            f(format!("enc{l}.pre.beta"), &self.enc_pre[l].bn.beta);
            f(format!("enc{l}.down.w"), &self.enc_down[l].0.w);
            f(format!("enc{l}.down.b"), &self.enc_down[l].0.b);
            f(format!("enc{l}.down.gamma"), &self.enc_down[l].1.gamma);
            f(format!("enc{l}.down.beta"), &self.enc_down[l].1.beta);
        }
        f("bottom.w".into(), &self.bottom.conv.w);
        f("bottom.b".into(), &self.bottom.conv.b);
        f("bottom.gamma".into(), &self.bottom.bn.gamma);
        f("bottom.beta".into(), &self.bottom.bn.beta);
        for l in (0..self.cfg.depth).rev() {
            f(format!("dec{l}.up.w"), &self.dec_up[l].0.w);
            f(format!("dec{l}.up.b"), &self.dec_up[l].0.b);
            f(format!("dec{l}.up.gamma"), &self.dec_up[l].1.gamma);
            f(format!("dec{l}.up.beta"), &self.dec_up[l].1.beta);
            f(format!("dec{l}.fuse.w"), &self.dec_fuse[l].conv.w);
            f(format!("dec{l}.fuse.b"), &self.dec_fuse[l].conv.b);
            f(format!("dec{l}.fuse.gamma"), &self.dec_fuse[l].bn.gamma);
            f(format!("dec{l}.fuse.beta"), &self.dec_fuse[l].bn.beta);
        }
        f("out.w".into(), &self.out.w);
        f("out.b".into(), &self.out.b);
    }

    /// Mutable variant of [`MiniUnet::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut Vec<T>)) {
        for l in 0..self.cfg.depth {
            f(format!("enc{l}.pre.w"), &mut self.enc_pre[l].conv.w);
            f(format!("enc{l}.pre.b"), &mut self.enc_pre[l].conv.b);
            f(format!("enc{l}.pre.gamma"), &mut self.enc_pre[l].bn.gamma);
            f(format!("enc{l}.pre.beta"), &mut self.enc_pre[l].bn.beta);
            f(format!("enc{l}.down.w"), &mut self.enc_down[l].0.w);
            f(format!("enc{l}.down.b"), &mut self.enc_down[l].0.b);
            f(format!("enc{l}.down.gamma"), &mut self.enc_down[l].1.gamma);
            f(format!("enc{l}.down.beta"), &mut self.enc_down[l].1.beta);
        }
        f("bottom.w".into(), &mut self.bottom.conv.w);
        f("bottom.b".into(), &mut self.bottom.conv.b);
        f("bottom.gamma".into(), &mut self.bottom.bn.gamma);
        f("bottom.beta".into(), &mut self.bottom.bn.beta);
        for l in (0..self.cfg.depth).rev() {
            f(format!("dec{l}.up.w"), &mut self.dec_up[l].0.w);
            f(format!("dec{l}.up.b"), &mut self.dec_up[l].0.b);
            f(format!("dec{l}.up.gamma"), &mut self.dec_up[l].1.gamma);
            f(format!("dec{l}.up.beta"), &mut self.dec_up[l].1.beta);
            f(format!("dec{l}.fuse.w"), &mut self.dec_fuse[l].conv.w);
            f(format!("dec{l}.fuse.b"), &mut self.dec_fuse[l].conv.b);
            f(format!("dec{l}.fuse.gamma"), &mut self.dec_fuse[l].bn.gamma);
            f(format!("dec{l}.fuse.beta"), &mut self.dec_fuse[l].bn.beta);
        }
        f("out.w".into(), &mut self.out.w);
        f("out.b".into(), &mut self.out.b);
    }

    /// Visits batch-norm running statistics (state, not parameters), in a
    /// fixed order used by checkpoints.
    pub fn visit_state_mut(&mut self, mut f: impl FnMut(String, &mut Vec<T>)) {
        for l in 0..self.cfg.depth {
            f(format!("enc{l}.pre.rmean"), &mut self.enc_pre[l].bn.running_mean);
            f(format!("enc{l}.pre.rvar"), &mut self.enc_pre[l].bn.running_var);
            f(format!("enc{l}.down.rmean"), &mut self.enc_down[l].1.running_mean);
            f(format!("enc{l}.down.rvar"), &mut self.enc_down[l].1.running_var);
        }
        f("bottom.rmean".into(), &mut self.bottom.bn.running_mean);
        f("bottom.rvar".into(), &mut self.bottom.bn.running_var);
        for l in (0..self.cfg.depth).rev() {
            f(format!("dec{l}.up.rmean"), &mut self.dec_up[l].1.running_mean);
            f(format!("dec{l}.up.rvar"), &mut self.dec_up[l].1.running_var);
            f(format!("dec{l}.fuse.rmean"), &mut self.dec_fuse[l].bn.running_mean);
            f(format!("dec{l}.fuse.rvar"), &mut self.dec_fuse[l].bn.running_var);
        }
    }

    /// Flattened copies of all parameters, visitation order.
    pub fn param_tensors(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(|name, t| out.push((name, t.clone())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.len());
        n
    }

    /// Reads parameter `i` of the flat enumeration.
    pub fn get_param(&self, mut i: usize) -> T {
        let mut found = None;
        self.visit_params(|_, t| {
            if found.is_none() {
                if i < t.len() {
                    found = Some(t[i]);
                } else {
                    i -= t.len();
                }
            }
        });
        found.expect("parameter index in range")
    }

    /// Writes parameter `i` of the flat enumeration.
    pub fn set_param(&mut self, mut i: usize, v: T) {
        let mut done = false;
        self.visit_params_mut(|_, t| {
            if !done {
                if i < t.len() {
                    t[i] = v;
                    done = true;
                } else {
                    i -= t.len();
                }
            }
        });
        assert!(done, "parameter index in range");
    }
}

impl<T: Real> NetGrads<T> {
    /// Reads gradient `i` of the flat enumeration (same order as params).
    pub fn get(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("gradient index out of range");
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}
