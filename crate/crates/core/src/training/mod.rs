//! Two-phase training: objectives, optimizer, schedule, augmentation, sampling, checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod losses;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, Phase};
pub use trainer::{StepRecord, Trainer};
