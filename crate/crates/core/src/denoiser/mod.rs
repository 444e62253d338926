//! Trainable conditional residual predictor with its own reverse-mode
//! differentiation, loss and optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod tape;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{residual_loss, LossValue};
pub use network::{DenoiserModel, ModelConfig};
pub use train::{loss_and_gradients, sample_batch, train, Batch, TrainConfig, TrainOutcome};
