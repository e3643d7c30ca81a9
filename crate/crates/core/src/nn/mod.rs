//! Minimal neural-network toolkit on top of `candle-core`: seeded parameter
//! creation, the handful of layers the models need, Adam, learning-rate
//! schedules and self-describing checkpoints.

mod channel;
mod checkpoint;
mod conv;
mod grid_conv;
mod layers;
mod norm;
mod optim;
mod params;

pub use channel::{add_channel_bias, channel_affine};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{conv2d, unfold};
pub use layers::{
    images_to_tensor, sigmoid, softmax_last_dim, tensor_to_images, Conv2d, Embedding, GroupNorm,
    LayerNorm, Linear,
};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Init, Params};

pub use candle_core::{DType, Device, Tensor, Var};
