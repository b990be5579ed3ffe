//! Loss stack, toy model and trainer for assistant and student distillation.

pub mod losses;
pub mod synthetic;
pub mod text;
pub mod toy;
pub mod train;

pub use losses::{
    class_nll, kl_divergence, masked_token_nll, multitask_loss, soft_losses, temp_softmax,
    total_student_loss, LogitTensor, LossBreakdown, LossWeights, TokenizedExample, IGNORE_INDEX,
};
pub use toy::{load_model, save_model, ModelHeader, ToyDims, ToyModel};
pub use train::{
    class_accuracy, grad_check, train, EpochLog, GradCheckReport, PlateauScheduler, Role,
    TrainConfig, TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("{0}")]
    Io(String),
    #[error("bad model file: {0}")]
    Format(String),
}
