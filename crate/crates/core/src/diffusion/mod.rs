//! Forward noising, masked reconstruction loss, DDIM sampling with
//! classifier-free guidance, and the optimization loops for pretraining and
//! adapter fine-tuning.

mod ddim;
mod loss;
mod optim;
mod schedule;
mod train;

pub use ddim::ddim_sample;
pub use loss::{masked_diff_loss, MaskGrid};
pub use optim::AdamW;
pub use schedule::{forward_noising, NoiseSchedule};
pub use train::{
    batch_indices, pretrain_step, train_step, PretrainSample, StepReport, TrainConfig,
    TrainSample, WeightPolicy,
};

use crate::model::ModelError;
use crate::sca::ScaError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {reason}")]
    Schedule { reason: String },
    #[error("invalid train config: {reason}")]
    Config { reason: String },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dimension {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("mask must be binary; found {value} at index {index}")]
    MaskNotBinary { value: f32, index: usize },
    #[error("non-finite loss; first bad tensor is #{index} from op '{op}'")]
    NonFinite { op: &'static str, index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sca(#[from] ScaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
