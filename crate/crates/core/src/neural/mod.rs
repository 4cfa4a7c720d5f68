//! A small deep-learning engine for the correction network: tensors,
//! layers with hand-written backward passes, Adam, the training loop and
//! checkpoints.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod real;
mod tensor;
mod train;

pub use checkpoint::{Dragon, ModelCheckpoint, TrainMeta, CHECKPOINT_VERSION};
pub use layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool, Param, Relu, BN_EPS, BN_MOMENTUM};
pub use model::{ArchitectureConfig, Model};
pub use optim::{Adam, AdamConfig};
pub use real::{gemm, Real};
pub use tensor::Tensor;
pub use train::{fit, mse, predict_set, train, TrainConfig, TrainHistory, TrainOutcome, TrainingSet};

#[cfg(test)]
mod tests;
