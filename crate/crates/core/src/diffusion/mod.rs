//! Glyph- and style-conditioned denoising diffusion in an identity latent.

mod model;
mod sample;
mod schedule;
mod train;

pub use model::{
    training_loss, ConditionedDenoiser, DiffusionConfig, GlyphCondition, GlyphEncoder, NoisePredictor,
    StyleCondition, StyleEncoder, PIXEL_HI, PIXEL_LO,
};
pub use sample::*;
pub use schedule::{make_schedule, q_sample, q_sample_batch, NoiseSchedule, ScheduleParams};
pub use train::*;
