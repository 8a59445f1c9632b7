//! Conditional denoising diffusion in pixel space.

pub mod checkpoint;
pub mod lr_encoder;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use lr_encoder::{ConvLrEncoder, LrEncoder};
pub use model::{text_context, ConditionItem, Conditioning, Denoiser, ModelSwitches, SrModel};
pub use sample::{ddpm_sample, SampleConfig, SampleInputs};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{training_loss, AdamW, AdamWConfig};
pub use unet::{Target, UNetConfig};
