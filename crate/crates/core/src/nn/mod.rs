//! Layers, the student network, parameter storage and the optimizer.

mod layers;
mod optim;
mod params;
mod session;
mod student;

pub use layers::{AffineMap, ConvBlock};
pub use optim::{Sgd, SgdConfig};
pub use params::{
    is_buffer_name, Init, ParamEntry, ParamSpec, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use session::{BnUpdate, Mode, Session, BN_EPS, BN_MOMENTUM};
pub use student::{StudentConfig, StudentNet, StudentOutput};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("no gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("input shape {actual:?} does not match expected [B, {expected:?}]")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
