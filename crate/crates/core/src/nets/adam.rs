//! Adam with bias correction, one moment pair per parameter tensor.

use super::net::{MiniUnet, NetGrads};
use super::train::TrainConfig;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    /// First moments, aligned with the parameter visitation order.
    pub m: Vec<Vec<T>>,
    /// Second moments.
    pub v: Vec<Vec<T>>,
    /// Completed steps.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &MiniUnet<T>) -> Self {
        let mut m = Vec::new();
        net.visit_params(|_, t| m.push(vec![T::zero(); t.len()]));
        let v = m.clone();
        Self { m, v, step: 0 }
    }
}

/// Standard Adam update with bias correction; increments the step count.
pub fn adam_step<T: Real>(
    net: &mut MiniUnet<T>,
    grads: &NetGrads<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let corr1 = 1.0 - b1.powf(t);
    let corr2 = 1.0 - b2.powf(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_eps;

    let mut ti = 0usize;
    net.visit_params_mut(|_, p| {
        let g = &grads.tensors[ti];
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        debug_assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            let gi = g[i].to64();
            let mi = b1 * m[i].to64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].to64() + (1.0 - b2) * gi * gi;
            m[i] = T::from64(mi);
            v[i] = T::from64(vi);
            let mhat = mi / corr1;
            let vhat = vi / corr2;
            p[i] = T::from64(p[i].to64() - lr * mhat / (vhat.sqrt() + eps));
        }
        ti += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetConfig, TrainLoss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> MiniUnet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MiniUnet::init(
            NetConfig {
                base_channels: 2,
                depth: 1,
            },
            &mut rng,
        )
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            loss: TrainLoss::PlainMse,
            ..Default::default()
        }
    }

    fn uniform_grads(net: &MiniUnet<f64>, g: f64) -> NetGrads<f64> {
        let mut tensors = Vec::new();
        net.visit_params(|_, t| tensors.push(vec![g; t.len()]));
        NetGrads { tensors }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = tiny_net();
        let before = net.param_tensors();
        let grads = uniform_grads(&net, 0.0);
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &grads, &mut state, &cfg());
        assert_eq!(state.step, 1);
        for ((_, a), (_, b)) in before.iter().zip(net.param_tensors()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut net = tiny_net();
        let before = net.param_tensors();
        let g = 0.37;
        let grads = uniform_grads(&net, g);
        let mut state = AdamState::new(&net);
        let c = cfg();
        adam_step(&mut net, &grads, &mut state, &c);
        // first bias-corrected step: -lr * g / (|g| + eps)
        let expect = -c.learning_rate * g / (g.abs() + c.adam_eps);
        for ((_, a), (_, b)) in before.iter().zip(net.param_tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((y - x - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let mut net = tiny_net();
        let p0 = net.get_param(11);
        let g = -0.82;
        let grads = uniform_grads(&net, g);
        let mut state = AdamState::new(&net);
        let c = cfg();
        adam_step(&mut net, &grads, &mut state, &c);
        adam_step(&mut net, &grads, &mut state, &c);

        // hand-rolled scalar recurrence
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, p0);
        for t in 1..=2u32 {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mhat = m / (1.0 - c.beta1.powi(t as i32));
            let vhat = v / (1.0 - c.beta2.powi(t as i32));
            p -= c.learning_rate * mhat / (vhat.sqrt() + c.adam_eps);
        }
        assert!((net.get_param(11) - p).abs() < 1e-14);
    }
}
