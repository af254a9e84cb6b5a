//! From-scratch hypercolumn pixel classifier: conv → BN → ReLU pixel-blocks,
//! bilinear hypercolumn sampling at sparse pixels, and a three-layer MLP head.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod spec;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use checkpoint::{load_net, save_net};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::{BatchNormState, BnMode, PixelRef};
pub use model::PixelNet;
pub use optim::{Optimizer, OptimizerConfig};
pub use spec::{NetSpec, PixelBlockSpec, N_CLASSES};
pub use tensor::Tensor;
pub use train::{predict_volume, prepare_slices, sample_training_pixels, train_step, SampleBatch, TrainConfig, Trainer, TrainingSlice};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("coordinate error: {0}")]
    Coordinate(String),
    #[error("model not trained: {0}")]
    Untrained(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
