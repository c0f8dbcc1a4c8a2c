//! Metrics over a manifest and report files.
//!
//! Reports are written as pretty JSON plus CSV tables. Wall-clock time lives in the single
//! `generated_at` field so that reruns differ in nothing else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::degrade::{Degradation, CODEC_VERSIONS};
use super::metrics::{auc, balanced_accuracy, pixel_f1, THRESHOLD};
use crate::data::ingest::load_rgb;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::predict::Predictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub codec_versions: String,
    pub noiseprint_source: String,
    pub generated_at: String,
}

impl RunInfo {
    pub fn new(config_hash: impl Into<String>, checkpoint_id: impl Into<String>, seed: u64, noiseprint_source: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            checkpoint_id: checkpoint_id.into(),
            seed,
            codec_versions: CODEC_VERSIONS.into(),
            noiseprint_source: noiseprint_source.into(),
            generated_at: now_rfc3339(),
        }
    }
}

/// UTC timestamp with second resolution.
pub fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    // civil-from-days (proleptic Gregorian)
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!("{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z", rem / 3600, (rem % 3600) / 60, rem % 60)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image: String,
    pub source: String,
    pub manipulated: bool,
    pub score: f64,
    /// Present for images with a ground-truth mask.
    pub pixel_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub source: String,
    pub images: usize,
    pub manipulated: usize,
    pub pixel_f1: Option<f64>,
    pub auc: Option<f64>,
    pub bacc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub pixel_f1: Option<f64>,
    pub auc: Option<f64>,
    pub bacc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub info: RunInfo,
    pub threshold: f64,
    pub degradation: String,
    pub datasets: Vec<DatasetMetrics>,
    pub average: Averages,
    pub rows: Vec<ImageRow>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn display(p: &Path, root: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

/// Predicts every record (in manifest order) after applying `degradation`.
pub fn score_manifest(predictor: &Predictor, manifest: &Manifest, degradation: Degradation) -> Result<Vec<ImageRow>> {
    let mut rows = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let img = degradation.apply(&load_rgb(&rec.image)?)?;
        let b = predictor.predict_image(&img, Some(&rec.image)).map_err(|e| e.in_stage(format!("predict {}", rec.image.display())))?;
        let f1 = match rec.load_mask()? {
            Some(m) if rec.label.is_manipulated() => {
                if (m.width() as usize, m.height() as usize) != (b.padding.width, b.padding.height) {
                    return Err(Error::Decode {
                        path: rec.mask.clone().unwrap_or_default(),
                        reason: format!("mask {:?} does not match image {}x{}", m.dimensions(), b.padding.width, b.padding.height),
                    });
                }
                Some(pixel_f1(b.localization.data(), m.as_raw(), THRESHOLD)?)
            }
            _ => None,
        };
        rows.push(ImageRow {
            image: display(&rec.image, &manifest.root),
            source: rec.source.clone(),
            manipulated: rec.label.is_manipulated(),
            score: f64::from(b.score),
            pixel_f1: f1,
        });
    }
    Ok(rows)
}

/// Per-source metrics; localization over images with masks, detection over all images.
pub fn summarize(rows: &[ImageRow]) -> (Vec<DatasetMetrics>, Averages) {
    let mut by: BTreeMap<&str, Vec<&ImageRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.source.as_str()).or_default().push(r);
    }
    let datasets: Vec<DatasetMetrics> = by
        .into_iter()
        .map(|(source, rs)| {
            let scores: Vec<f64> = rs.iter().map(|r| r.score).collect();
            let labels: Vec<u8> = rs.iter().map(|r| u8::from(r.manipulated)).collect();
            DatasetMetrics {
                source: source.to_string(),
                images: rs.len(),
                manipulated: labels.iter().filter(|&&l| l == 1).count(),
                pixel_f1: mean(rs.iter().filter_map(|r| r.pixel_f1)),
                auc: auc(&scores, &labels).ok(),
                bacc: balanced_accuracy(&scores, &labels, THRESHOLD).ok(),
            }
        })
        .collect();
    let average = Averages {
        pixel_f1: mean(datasets.iter().filter_map(|d| d.pixel_f1)),
        auc: mean(datasets.iter().filter_map(|d| d.auc)),
        bacc: mean(datasets.iter().filter_map(|d| d.bacc)),
    };
    (datasets, average)
}

pub fn evaluate(predictor: &Predictor, manifest: &Manifest, degradation: Degradation, info: RunInfo) -> Result<MetricsReport> {
    let rows = score_manifest(predictor, manifest, degradation)?;
    let (datasets, average) = summarize(&rows);
    Ok(MetricsReport { info, threshold: THRESHOLD, degradation: format!("{degradation:?}"), datasets, average, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl MetricsReport {
    pub fn datasets_csv(&self) -> String {
        let mut s = String::from("dataset,images,manipulated,pixel_f1,auc,bacc\n");
        for d in &self.datasets {
            s += &format!("{},{},{},{},{},{}\n", d.source, d.images, d.manipulated, opt(d.pixel_f1), opt(d.auc), opt(d.bacc));
        }
        s += &format!("AVG,,,{},{},{}\n", opt(self.average.pixel_f1), opt(self.average.auc), opt(self.average.bacc));
        s
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("image,source,manipulated,score,pixel_f1\n");
        for r in &self.rows {
            s += &format!("{},{},{},{:.6},{}\n", r.image, r.source, u8::from(r.manipulated), r.score, opt(r.pixel_f1));
        }
        s
    }

    /// Writes `metrics.json`, `metrics.csv` and `images.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let files = [
            (dir.join("metrics.json"), serde_json::to_string_pretty(self)? + "\n"),
            (dir.join("metrics.csv"), self.datasets_csv()),
            (dir.join("images.csv"), self.rows_csv()),
        ];
        for (p, c) in &files {
            write_file(p, c)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
