//! Seeded training loop: uniform patch sampling with foreground
//! rejection, forward/loss/backward/Adam per iteration.

use super::adam::{adam_step, AdamState};
use super::net::MiniUnet;
use super::tensor::Batch;
use super::{NetConfig, NetError};
use crate::foreground::fg_fraction;
use crate::losses::{plain_mse, spotlight_loss, LossConfig};
use crate::volume::{Dims, MaskVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Objective used during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainLoss {
    /// Unmasked MSE over the whole patch (the baseline arm).
    PlainMse,
    /// Foreground-aware combined loss.
    Spotlight(LossConfig),
}

/// Optimizer and sampling protocol.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patch_shape: Dims,
    pub iterations: usize,
    pub rng_seed: u64,
    pub loss: TrainLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            patch_shape: Dims::new(16, 32, 32),
            iterations: 2000,
            rng_seed: 0,
            loss: TrainLoss::Spotlight(LossConfig::default()),
        }
    }
}

/// Minimum foreground fraction for a patch to take part in
/// foreground-aware training.
pub const MIN_FG_FRACTION: f64 = 0.001;
/// Resampling attempts per batch slot before giving up.
pub const MAX_PATCH_RETRIES: usize = 100;

/// One training volume triple; inputs and targets are already
/// standardized, the mask comes from the raw target's Otsu threshold.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Volume<f32>,
    pub target: Volume<f32>,
    pub mask: MaskVolume,
}

struct PatchPick {
    volume: usize,
    origin: Dims,
}

fn sample_patch(
    rng: &mut ChaCha8Rng,
    dataset: &[TrainSample],
    patch: Dims,
    need_fg: bool,
) -> Result<PatchPick, NetError> {
    for _ in 0..MAX_PATCH_RETRIES {
        let vi = rng.gen_range(0..dataset.len());
        let d = dataset[vi].input.dims();
        let origin = Dims::new(
            rng.gen_range(0..=d.z - patch.z),
            rng.gen_range(0..=d.y - patch.y),
            rng.gen_range(0..=d.x - patch.x),
        );
        if need_fg {
            let m = dataset[vi].mask.extract_patch(origin, patch)?;
            if fg_fraction(&m) < MIN_FG_FRACTION {
                continue;
            }
        }
        return Ok(PatchPick { volume: vi, origin });
    }
    Err(NetError::NoForegroundPatches {
        retries: MAX_PATCH_RETRIES,
    })
}

/// Trains a fresh network on the dataset; identical seeds produce
/// bit-identical parameters and loss traces.
pub fn train(
    train_cfg: &TrainConfig,
    net_cfg: &NetConfig,
    dataset: &[TrainSample],
) -> Result<(MiniUnet<f32>, Vec<f64>), NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let patch = train_cfg.patch_shape;
    let m = net_cfg.divisor();
    if patch.z % m != 0 || patch.y % m != 0 || patch.x % m != 0 {
        return Err(NetError::ShapeMismatch(format!(
            "patch shape {patch} not divisible by 2^depth = {m}"
        )));
    }
    for (i, s) in dataset.iter().enumerate() {
        let d = s.input.dims();
        if s.target.dims() != d || s.mask.dims() != d {
            return Err(NetError::ShapeMismatch(format!(
                "sample {i}: input/target/mask shapes disagree"
            )));
        }
        if d.z < patch.z || d.y < patch.y || d.x < patch.x {
            return Err(NetError::ShapeMismatch(format!(
                "sample {i}: volume {d} smaller than patch {patch}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.rng_seed);
    let mut net = MiniUnet::<f32>::init(*net_cfg, &mut rng);
    let mut state = AdamState::new(&net);
    let mut trace = Vec::with_capacity(train_cfg.iterations);
    let need_fg = matches!(train_cfg.loss, TrainLoss::Spotlight(_));
    let b = train_cfg.batch_size;

    for iteration in 0..train_cfg.iterations {
        let mut input = Batch::<f32>::zeros(b, 1, patch);
        let mut targets = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for slot in 0..b {
            let pick = sample_patch(&mut rng, dataset, patch, need_fg)?;
            let s = &dataset[pick.volume];
            let ip = s.input.extract_patch(pick.origin, patch)?;
            input.channel_mut(slot, 0).copy_from_slice(ip.data());
            targets.push(s.target.extract_patch(pick.origin, patch)?);
            masks.push(s.mask.extract_patch(pick.origin, patch)?);
        }

        let (pred, cache) = net.forward_train(&input)?;
        let mut grad = Batch::<f32>::zeros(b, 1, patch);
        let mut loss_sum = 0.0f64;
        let inv_b = 1.0 / b as f64;
        for slot in 0..b {
            let pred_vol = pred.to_volume(slot, 0, [1.0, 1.0, 1.0]);
            let result = match &train_cfg.loss {
                TrainLoss::PlainMse => plain_mse(&pred_vol, &targets[slot])?,
                TrainLoss::Spotlight(cfg) => {
                    spotlight_loss(&pred_vol, &targets[slot], &masks[slot], cfg)?
                }
            };
            loss_sum += result.value;
            let g = grad.channel_mut(slot, 0);
            for (gv, &lv) in g.iter_mut().zip(result.grad.data()) {
                *gv = lv * inv_b as f32;
            }
        }
        let loss = loss_sum * inv_b;
        if !loss.is_finite() {
            return Err(NetError::NumericFailure { iteration });
        }
        trace.push(loss);

        let grads = net.backward(&cache, &grad)?;
        adam_step(&mut net, &grads, &mut state, train_cfg);
        net.update_running_stats(&cache);
    }

    Ok((net, trace))
}

/// Inference on a full volume: wraps it as a batch, crops to the
/// network's divisor if needed, runs the eval-mode forward.
pub fn predict(net: &MiniUnet<f32>, input: &Volume<f32>) -> Result<Volume<f32>, NetError> {
    let cropped = input.crop_to_multiple(net.cfg.divisor())?;
    let batch = Batch::from_volume(&cropped);
    let pred = net.forward_eval(&batch)?;
    Ok(pred.to_volume(0, 0, cropped.voxel_size()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foreground::{foreground_mask, otsu_threshold, standardize, OTSU_BINS};
    use crate::synth::{generate_phantom, PhantomConfig};

    fn tiny_dataset() -> Vec<TrainSample> {
        let cfg = PhantomConfig {
            shape: Dims::new(16, 48, 48),
            n_nuclei: 3,
            radius_range: (4.0, 6.0),
            seed: 11,
            ..Default::default()
        };
        let s = generate_phantom(&cfg).unwrap();
        let otsu = otsu_threshold(&s.target, OTSU_BINS).unwrap();
        let mask = foreground_mask(&s.target, otsu.threshold);
        let (target, _) = standardize(&s.target, otsu.threshold).unwrap();
        let (input, _) = standardize(&s.input, s.input.mean()).unwrap();
        vec![TrainSample {
            input,
            target,
            mask,
        }]
    }

    fn tiny_cfg(loss: TrainLoss, iterations: usize) -> (TrainConfig, NetConfig) {
        (
            TrainConfig {
                batch_size: 2,
                patch_shape: Dims::new(8, 16, 16),
                iterations,
                rng_seed: 5,
                loss,
                ..Default::default()
            },
            NetConfig {
                base_channels: 4,
                depth: 1,
            },
        )
    }

    #[test]
    fn zero_iterations_returns_init() {
        let data = tiny_dataset();
        let (tc, nc) = tiny_cfg(TrainLoss::PlainMse, 0);
        let (net, trace) = train(&tc, &nc, &data).unwrap();
        assert!(trace.is_empty());
        // params equal a fresh init from the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(tc.rng_seed);
        let fresh = MiniUnet::<f32>::init(nc, &mut rng);
        for ((_, a), (_, b)) in net.param_tensors().iter().zip(fresh.param_tensors()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let data = tiny_dataset();
        let (tc, nc) = tiny_cfg(TrainLoss::Spotlight(LossConfig::default()), 5);
        let (_, t1) = train(&tc, &nc, &data).unwrap();
        let (_, t2) = train(&tc, &nc, &data).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 5);
    }

    #[test]
    fn loss_decreases_over_training() {
        let data = tiny_dataset();
        let (tc, nc) = tiny_cfg(TrainLoss::Spotlight(LossConfig::default()), 300);
        let (_, trace) = train(&tc, &nc, &data).unwrap();
        let head: f64 = trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = trace[250..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < head,
            "expected trailing mean {tail} < leading mean {head}"
        );
    }

    #[test]
    fn rejects_when_no_foreground() {
        let data = vec![TrainSample {
            input: Volume::zeros(Dims::new(8, 16, 16), [1.0; 3]),
            target: Volume::zeros(Dims::new(8, 16, 16), [1.0; 3]),
            mask: MaskVolume::zeros(Dims::new(8, 16, 16)),
        }];
        let (tc, nc) = tiny_cfg(TrainLoss::Spotlight(LossConfig::default()), 1);
        assert!(matches!(
            train(&tc, &nc, &data),
            Err(NetError::NoForegroundPatches { .. })
        ));
    }

    #[test]
    fn predict_crops_indivisible_input() {
        let data = tiny_dataset();
        let (tc, nc) = tiny_cfg(TrainLoss::PlainMse, 1);
        let (net, _) = train(&tc, &nc, &data).unwrap();
        let input = Volume::<f32>::from_fn(Dims::new(9, 17, 18), [1.0; 3], |z, y, x| {
            (z + y + x) as f32 * 0.01
        });
        let out = predict(&net, &input).unwrap();
        assert_eq!(out.dims(), Dims::new(8, 16, 18));
    }
}
