//! Class-conditional denoising diffusion: noise schedule, closed-form forward
//! process, noise-prediction training and ancestral sampling.

mod ddpm;
mod schedule;
mod unet;

pub use ddpm::{
    noise_prediction_loss, q_sample, q_step, sample, train_ddpm, train_step, DdpmTrainConfig,
    NoisePredictor, TrainLog,
};
pub use schedule::{build_schedule, DiffusionSchedule, ScheduleConfig};
pub use unet::{ConditionEmbedding, DenoiserConfig, UNet};

/// Images live in [0,1]; the diffusion model works in [-1,1].
pub fn to_model_space(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn from_model_space(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}
