//! Noise schedule, denoiser training, the deterministic sampler, and the
//! closed-form Gaussian-mixture denoiser used to verify them.

mod gmm;
mod sampler;
mod schedule;
mod train;

pub use gmm::{gmm_posterior_mean, GmmSpec};
pub use sampler::{euler_sample, Denoiser, GmmOracle};
pub use schedule::NoiseSchedule;
pub use train::{
    draw_examples, noise_prediction_loss, train, Example, TrainConfig, Trainer, TrainingBatch,
};
