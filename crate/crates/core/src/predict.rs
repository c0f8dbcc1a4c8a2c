//! End-to-end inference: decode, pad, extract residuals, run the network, crop back.

use std::path::Path;

use image::RgbImage;
use mmf_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{Modality, ResidualConfig};
use crate::data::ingest::{crop, load_rgb, pad_tensor, rgb_to_tensor, Padding};
use crate::error::{config, Result};
use crate::filters::Extractor;
use crate::model::{Model, ModelInput, Residuals};

/// The three outputs for one image, cropped to its original size.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    /// `[1, 1, H, W]` manipulation probability.
    pub localization: Tensor<f32>,
    /// `[1, 1, H, W]`.
    pub confidence: Tensor<f32>,
    pub score: f32,
    pub padding: Padding,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleSummary {
    pub height: usize,
    pub width: usize,
    pub score: f32,
    pub manipulated_fraction: f64,
}

impl PredictionBundle {
    pub fn summary(&self) -> BundleSummary {
        let d = self.localization.data();
        let pos = d.iter().filter(|&&v| f64::from(v) > crate::evaluation::metrics::THRESHOLD).count();
        BundleSummary {
            height: self.padding.height,
            width: self.padding.width,
            score: self.score,
            manipulated_fraction: pos as f64 / d.len().max(1) as f64,
        }
    }
}

/// A padded image with its residuals, ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: ModelInput<f32>,
    pub padding: Padding,
}

pub struct Predictor {
    pub model: Model<f32>,
    pub extractor: Extractor,
    pub checkpoint_id: String,
}

impl Predictor {
    pub fn new(model: Model<f32>, residuals: &ResidualConfig, checkpoint_id: impl Into<String>) -> Result<Self> {
        let extractor = Extractor::new(residuals, &model.config().encoder.modalities())?;
        Ok(Self { model, extractor, checkpoint_id: checkpoint_id.into() })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.model.config().encoder.modalities()
    }

    pub fn prepare(&self, img: &RgbImage, source: Option<&Path>) -> Result<Prepared> {
        let (image, padding) = pad_tensor(&rgb_to_tensor(img))?;
        let residuals = self.extractor.extract(&image, source).map_err(|e| e.in_stage("residual extraction"))?;
        Ok(Prepared { input: ModelInput { image, residuals }, padding })
    }

    /// The residual a modality contributes for this input, including the in-network filter.
    pub fn residual(&self, prepared: &Prepared, m: Modality) -> Result<Tensor<f32>> {
        if let Some(t) = prepared.input.residuals.get(m) {
            return Ok(t.clone());
        }
        match (m, &self.model.arch.bayar) {
            (Modality::Bayar, Some(b)) => b.apply(&self.model.store, &prepared.input.image),
            _ => Err(config(format!("model does not use the {} residual", m.name()))),
        }
    }

    pub fn run(&self, prepared: &Prepared) -> Result<PredictionBundle> {
        let p = self.model.predict(&prepared.input).map_err(|e| e.in_stage("network"))?;
        let (h, w) = (prepared.padding.height, prepared.padding.width);
        Ok(PredictionBundle {
            localization: crop(&p.localization, h, w)?,
            confidence: crop(&p.confidence, h, w)?,
            score: p.scores[0],
            padding: prepared.padding,
        })
    }

    /// Runs with one residual replaced.
    pub fn run_with(&self, prepared: &Prepared, m: Modality, replacement: Tensor<f32>) -> Result<PredictionBundle> {
        let mut p = prepared.clone();
        let mut r: Residuals<f32> = p.input.residuals;
        r.set(m, Some(replacement));
        p.input.residuals = r;
        self.run(&p)
    }

    pub fn predict_image(&self, img: &RgbImage, source: Option<&Path>) -> Result<PredictionBundle> {
        let p = self.prepare(img, source)?;
        self.run(&p)
    }

    pub fn predict_path(&self, path: &Path) -> Result<PredictionBundle> {
        let img = load_rgb(path).map_err(|e| e.in_stage("decode"))?;
        self.predict_image(&img, Some(path))
    }
}
