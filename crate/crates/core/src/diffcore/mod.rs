//! Noise schedule, denoiser training, DDIM sampling and inversion.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{train_denoiser, Denoiser, DenoiserConfig, TimeEmbedding};
pub use sampler::{
    ddim_invert, ddim_invert_batch, ddim_predict_x0, ddim_step, ddim_step_batch, predict_x0_batch, sample_batch,
    sample_from, GuidanceHook, IdentityHook, SampleOutput, Trajectory, TrajectoryStep, ALPHA_BAR_FLOOR,
};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleConfig};
