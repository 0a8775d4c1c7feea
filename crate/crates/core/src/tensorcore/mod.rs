//! Numeric substrate: tensors, reverse-mode autodiff, layers, optimizers,
//! schedules, gradient checking and checkpoint files.

pub(crate) mod checkpoint;
mod graph;
mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tensor;
pub mod wire;

pub use checkpoint::{
    decode_entries, encode_entries, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{BatchNormState, Graph, Mode, Var};
pub use gradcheck::{grad_check, Differentiable};
pub use optim::{adam_step, clip_global_norm, cosine_lr, Adam, AdamConfig, LrSchedule};
pub use params::{Param, ParamStore};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction, graph ops and optimizers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: degenerate dimension {dim}")]
    DegenerateDimension { op: &'static str, dim: usize },
    #[error("unsupported kernel size {k}; only odd sizes are supported")]
    UnsupportedKernel { k: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("trainable parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}
