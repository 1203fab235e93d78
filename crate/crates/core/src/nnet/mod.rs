//! Miniature CTC encoder: a strided convolutional front-end followed by
//! post-norm transformer blocks, with hand-written backpropagation.

mod checkpoint;
mod ctc;
mod model;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use ctc::{ctc_loss_grad, ctc_required_frames, log_softmax_rows};
pub use model::{forward, loss_and_grad};
pub use params::{average_checkpoints, Block, LayerNorm, Linear, Params};
pub use train::{lr_schedule, train, Adam, EpochRecord, TrainHyper, TrainOutcome};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label of length {label_len} needs {required} frames but only {frames} are available")]
    Infeasible { frames: usize, required: usize, label_len: usize },
    #[error("label contains id {0} outside the output vocabulary")]
    LabelOutOfRange(u32),
    #[error("tensor shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("learning-rate schedule is undefined at step 0")]
    ZeroStep,
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("no trainable utterances: {0}")]
    EmptyTrainingSet(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub subsample_stride: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f32,
    /// Labels plus the blank at index 0.
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            subsample_stride: 2,
            n_blocks: 2,
            d_model: 32,
            n_heads: 2,
            ff_dim: 64,
            dropout_p: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let fail = |m: &str| Err(NnetError::Config(m.to_owned()));
        if self.input_dim == 0 || self.d_model == 0 || self.ff_dim == 0 {
            return fail("dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.subsample_stride == 0 {
            return fail("subsample_stride must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must include the blank and at least one label");
        }
        Ok(())
    }

    /// Output frame count for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_stride)
    }
}

/// Whether dropout is active during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DropoutMode {
    Off,
    /// Inverted dropout with masks drawn from one stream seeded by `seed`.
    Seeded { seed: u64, p: f32 },
}
