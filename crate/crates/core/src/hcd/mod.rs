//! Complementary feature mapping, sub-logit distillation and the
//! orthogonality constraint.

mod cfm;
mod config;
mod losses;
mod objective;

pub use cfm::{CfmHead, DistillNet, NetOutput};
pub use config::{FusionMode, HcdConfig};
pub use losses::{
    concat_sub_logits, cross_entropy, decompose, fuse_teacher, kl_div, mask_ground_truth,
    orth_loss, sub_ce_loss, sub_kd_loss, vanilla_kd_loss, SubLogits,
};
pub use objective::{hcd_total_loss, LossBreakdown};

use thiserror::Error;

use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HcdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid hcd configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {k} classes")]
    Label { label: usize, k: usize },
    #[error("{0}")]
    Width(String),
}

pub type Result<T> = std::result::Result<T, HcdError>;
