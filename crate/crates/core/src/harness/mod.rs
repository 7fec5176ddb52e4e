//! Datasets, experiment configuration, training, evaluation and ablations.

mod ablate;
mod config;
mod data;
mod gradsuite;
mod train;

pub use ablate::{
    ablate, ablate_with, read_ablation, thread_count, AblationRow, Axis, ABLATION_FILE,
    ABLATION_HEADER, THREADS_ENV,
};
pub use config::{ExperimentConfig, Method};
pub use data::{
    bars_pattern, gen_dataset, DataError, Dataset, DatasetKind, GenOptions, BARS_NOISE,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use gradsuite::{run_grad_suite, GradSuiteOptions, GradSuiteReport};
pub use train::{
    argmax, build_model, evaluate, evaluate_student, read_metrics, split_ranges, top1_accuracy,
    train, train_to_dir, train_with, MetricsRow, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE,
    METRICS_HEADER,
};

use thiserror::Error;

use crate::hcd::HcdError;
use crate::nn::NnError;
use crate::teacher::TeacherError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Hcd(#[from] HcdError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {term} loss in epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether the error stems from invalid user input rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Teacher(TeacherError::Mismatch { .. })
                | HarnessError::Hcd(HcdError::Config(_))
                | HarnessError::Nn(NnError::Config(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
