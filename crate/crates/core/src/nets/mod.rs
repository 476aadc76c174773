//! Miniature 3D convolutional encoder-decoder with explicit forward and
//! backward passes, Adam, checkpointing and a seeded training loop.
//!
//! The architecture is a small U-Net-style regressor: per level a
//! 3-voxel stride-1 convolution on zero-padded input, a 2-voxel stride-2
//! convolution to halve the resolution, a bottom 3-voxel convolution, a
//! 2-voxel stride-2 transposed convolution back up, a channel
//! concatenation with the pre-downsample activation and a fusing 3-voxel
//! convolution. Every convolution is followed by batch normalization and
//! ReLU except the final linear output layer.
//!
//! All computation is hand-rolled so the backward pass can be checked
//! against central finite differences in double precision.

mod adam;
mod checkpoint;
mod layers;
mod net;
mod tensor;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{BatchNorm, Conv3, ConvDown, ConvUp};
pub use net::{MiniUnet, NetCache, NetGrads};
pub use tensor::Batch;
pub use train::{train, TrainConfig, TrainLoss, TrainSample};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale or mismatched forward cache: {0}")]
    InvalidCache(String),
    #[error("no patch with enough foreground found after {retries} retries")]
    NoForegroundPatches { retries: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NumericFailure { iteration: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

/// Shape of the miniature network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Channel count of the first level; deeper levels double it.
    pub base_channels: usize,
    /// Number of down/upsample levels.
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 1,
        }
    }
}

impl NetConfig {
    /// Spatial dimensions of any input must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}
