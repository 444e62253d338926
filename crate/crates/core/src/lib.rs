//! Residual diffusion enhancement on top of a block-transform base codec.

pub mod analysis;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod field;
pub mod residual;
pub mod sampler;
pub mod schedule;

pub use error::{CoreError, Result};
pub use field::ResidualField;
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec, TimestepPlan, WeightMode};
