//! Datasets: manifests, decoding, padding, video frames and synthetic corpora.

pub mod ingest;
pub mod manifest;
pub mod synthetic;
pub mod video;

pub use manifest::{Label, Manifest, MaskPolarity, Record};
