//! Multi-modal image manipulation localization and detection.
//!
//! An RGB image and several forensic residuals feed a dual-branch transformer encoder; heads
//! predict a per-pixel manipulation map, a per-pixel confidence map and an image-level
//! integrity score.

pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod filters;
pub mod model;
pub mod predict;
pub mod training;

pub use mmf_numerics as numerics;
pub use config::{FusionMode, Modality, ModelConfig, Profile, RunConfig};
pub use error::{Error, Result};
pub use model::{Architecture, Heads, Model, ModelInput, Prediction, Residuals};
