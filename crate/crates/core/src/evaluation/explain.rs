//! Modality masking: replace one residual input and measure how localization changes.
//!
//! With ground truth the drop in pixel F1 is reported; without it (blind mode) each masked
//! prediction is scored against the binarized unmasked prediction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use mmf_numerics::kernels::resize_bilinear_forward;
use mmf_numerics::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{pixel_f1, THRESHOLD};
use super::report::{write_file, RunInfo};
use crate::config::Modality;
use crate::data::ingest::{load_rgb, rgb_to_tensor};
use crate::data::{Label, Manifest};
use crate::error::{config, Error, Result};
use crate::filters::noiseprint::proxy;
use crate::predict::{PredictionBundle, Predictor, Prepared};
use crate::training::trainer::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Zeros,
    RandomImage,
    /// Replaces the residual with itself; every measure must come out neutral.
    SelfMask,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "random_image" | "random-image" => Ok(Self::RandomImage),
            "self" | "self_mask" => Ok(Self::SelfMask),
            _ => Err(config(format!("unknown mask mode {s:?} (zeros, random_image, self)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub target: Modality,
    pub mode: MaskMode,
    /// Authentic images to draw replacements from.
    pub pool: Vec<PathBuf>,
}

impl MaskSpec {
    pub fn new(target: Modality, mode: MaskMode, pool: Option<&Manifest>) -> Result<Self> {
        let pool = pool
            .map(|m| m.records.iter().filter(|r| r.label == Label::Authentic).map(|r| r.image.clone()).collect())
            .unwrap_or_default();
        let spec = Self { target, mode, pool };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == MaskMode::RandomImage && self.pool.is_empty() {
            return Err(config("random_image masking needs a non-empty pool of authentic images"));
        }
        Ok(())
    }
}

/// The replacement residual for `prepared` under `spec`.
pub fn mask_modality(predictor: &Predictor, prepared: &Prepared, spec: &MaskSpec, rng: &mut dyn RngCore) -> Result<Tensor<f32>> {
    spec.validate()?;
    let original = predictor.residual(prepared, spec.target)?;
    match spec.mode {
        MaskMode::SelfMask => Ok(original),
        MaskMode::Zeros => Ok(Tensor::zeros(original.shape())),
        MaskMode::RandomImage => {
            let pick = &spec.pool[rng.random_range(0..spec.pool.len())];
            let (_, _, h, w) = original.dims4()?;
            pristine_residual(predictor, pick, spec.target, h, w)
        }
    }
}

/// The target filter's residual of a pristine image resized to `h × w`.
fn pristine_residual(predictor: &Predictor, path: &Path, m: Modality, h: usize, w: usize) -> Result<Tensor<f32>> {
    let img = load_rgb(path)?;
    let img = resize(&img, w as u32, h as u32, FilterType::Triangle);
    let t = rgb_to_tensor(&img);
    let ex = &predictor.extractor;
    match m {
        Modality::Srm => ex.srm.residual(&t),
        Modality::Noiseprint if ex.noiseprint.is_proxy() => proxy(&t),
        Modality::Noiseprint => {
            let map = ex.noiseprint.residual_unchecked(Some(path))?;
            Ok(resize_bilinear_forward(&map, h, w)?)
        }
        Modality::Bayar => match &predictor.model.arch.bayar {
            Some(b) => b.apply(&predictor.model.store, &t),
            None => Err(config("model does not use the bayar residual")),
        },
    }
}

/// Pixel F1 of `masked` against the binarized `reference` prediction.
pub fn prediction_quality(masked: &PredictionBundle, reference: &PredictionBundle) -> Result<f64> {
    let gt: Vec<u8> = reference.localization.data().iter().map(|&v| u8::from(f64::from(v) > THRESHOLD)).collect();
    pixel_f1(masked.localization.data(), &gt, THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRow {
    pub image: String,
    pub source: String,
    pub f1_unmasked: Option<f64>,
    pub f1_masked: Option<f64>,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainDataset {
    pub source: String,
    pub images: usize,
    pub delta_f1: Option<f64>,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub info: RunInfo,
    pub target: Modality,
    pub mode: MaskMode,
    pub blind: bool,
    /// Average over datasets of the per-dataset F1 drop.
    pub delta_f1: Option<f64>,
    /// Average over datasets of the per-dataset mean PQ.
    pub pq: f64,
    pub datasets: Vec<ExplainDataset>,
    pub rows: Vec<ExplainRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Masks `spec.target` on every evaluated image. Non-blind runs cover manipulated images with
/// masks; blind runs cover every image and need no ground truth. Replacement draws are seeded
/// per image from `seed`.
pub fn explain(predictor: &Predictor, manifest: &Manifest, spec: &MaskSpec, seed: u64, blind: bool, info: RunInfo) -> Result<ExplainReport> {
    spec.validate()?;
    if !predictor.modalities().contains(&spec.target) {
        return Err(config(format!("model does not use the {} residual", spec.target.name())));
    }
    let mut rows = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let gt = if blind {
            None
        } else if !rec.label.is_manipulated() {
            continue;
        } else {
            match rec.load_mask()? {
                Some(m) => Some(m),
                None => continue,
            }
        };
        let img = load_rgb(&rec.image)?;
        let prepared = predictor.prepare(&img, Some(&rec.image))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let replacement = mask_modality(predictor, &prepared, spec, &mut rng).map_err(|e| e.in_stage("masking"))?;
        let plain = predictor.run(&prepared)?;
        let masked = predictor.run_with(&prepared, spec.target, replacement)?;
        let (f1_unmasked, f1_masked) = match &gt {
            Some(m) => (
                Some(pixel_f1(plain.localization.data(), m.as_raw(), THRESHOLD)?),
                Some(pixel_f1(masked.localization.data(), m.as_raw(), THRESHOLD)?),
            ),
            None => (None, None),
        };
        rows.push(ExplainRow {
            image: rec.image.strip_prefix(&manifest.root).unwrap_or(&rec.image).display().to_string(),
            source: rec.source.clone(),
            f1_unmasked,
            f1_masked,
            pq: prediction_quality(&masked, &plain)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Metric("no images to explain (non-blind runs need manipulated images with masks)".into()));
    }
    let mut by: BTreeMap<&str, Vec<&ExplainRow>> = BTreeMap::new();
    for r in &rows {
        by.entry(r.source.as_str()).or_default().push(r);
    }
    let datasets: Vec<ExplainDataset> = by
        .into_iter()
        .map(|(source, rs)| {
            let u: Vec<f64> = rs.iter().filter_map(|r| r.f1_unmasked).collect();
            let m: Vec<f64> = rs.iter().filter_map(|r| r.f1_masked).collect();
            let pq: Vec<f64> = rs.iter().map(|r| r.pq).collect();
            ExplainDataset {
                source: source.to_string(),
                images: rs.len(),
                delta_f1: mean(&u).zip(mean(&m)).map(|(a, b)| a - b),
                pq: mean(&pq).unwrap_or(1.0),
            }
        })
        .collect();
    let deltas: Vec<f64> = datasets.iter().filter_map(|d| d.delta_f1).collect();
    let pqs: Vec<f64> = datasets.iter().map(|d| d.pq).collect();
    Ok(ExplainReport {
        info,
        target: spec.target,
        mode: spec.mode,
        blind,
        delta_f1: mean(&deltas),
        pq: mean(&pqs).unwrap_or(1.0),
        datasets,
        rows,
    })
}

impl ExplainReport {
    /// Writes `explain_<modality>_<mode>.json` and `.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mode = serde_json::to_value(self.mode)?.as_str().unwrap_or("mode").to_string();
        let stem = format!("explain_{}_{mode}", self.target.name());
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut csv = String::from("dataset,images,delta_f1,pq\n");
        for d in &self.datasets {
            csv += &format!("{},{},{},{:.6}\n", d.source, d.images, opt(d.delta_f1), d.pq);
        }
        csv += &format!("AVG,,{},{:.6}\n", opt(self.delta_f1), self.pq);
        let files = [(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n"), (dir.join(format!("{stem}.csv")), csv)];
        for (p, c) in &files {
            write_file(p, c)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
