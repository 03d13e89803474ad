//! Residual 3D U-Net with group normalisation, trained on sparse labels.
//!
//! Each resolution level is a residual block of two 3×3×3 convolutions with
//! group norm and ReLU. Levels are joined by max pooling on the way down and
//! strided transposed convolutions on the way up, with skip connections
//! concatenated before each decoder block. All convolutions are
//! same-padded so outputs match input spatial dims.

pub mod checkpoint;
mod config;
pub mod inference;
pub mod layers;
mod loss;
mod network;
mod params;
pub mod sampling;
mod tensor;
mod train;

pub use checkpoint::Checkpoint;
pub use config::NetworkConfig;
pub use inference::{predict_box, segment, InferenceOptions};
pub use loss::{masked_loss, masked_loss_logits, LossOutput, DICE_SMOOTH};
pub use network::{foreground_probability, sigmoid, Tape, UNet};
pub use params::{init_params, ModelParameters, Param};
pub use sampling::{extract_region, sample_patch, PatchSample, TrainingItem};
pub use tensor::Tensor;
pub use train::{batch_gradients, train_step, OptimizerConfig, Sgd};
