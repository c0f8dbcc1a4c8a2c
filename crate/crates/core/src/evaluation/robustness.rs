//! Localization F1 under increasing blur and JPEG compression.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::degrade::{Degradation, DegradationKind, DegradationSpec};
use super::report::{score_manifest, summarize, write_file, RunInfo};
use crate::data::Manifest;
use crate::error::Result;
use crate::predict::Predictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub level: u32,
    pub pixel_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub kind: DegradationKind,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub info: RunInfo,
    pub baseline_pixel_f1: f64,
    pub series: Vec<Series>,
}

/// Average localization F1 over the manifest's sources after one degradation.
pub fn f1_under(predictor: &Predictor, manifest: &Manifest, d: Degradation) -> Result<f64> {
    let rows = score_manifest(predictor, manifest, d)?;
    let (_, avg) = summarize(&rows);
    avg.pixel_f1.ok_or_else(|| crate::error::Error::Metric("manifest has no manipulated images with masks".into()))
}

pub fn sweep(predictor: &Predictor, manifest: &Manifest, specs: &[DegradationSpec], info: RunInfo) -> Result<RobustnessReport> {
    let baseline = f1_under(predictor, manifest, Degradation::Identity)?;
    let mut series = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut points = Vec::with_capacity(spec.levels.len());
        for &level in &spec.levels {
            let f1 = f1_under(predictor, manifest, Degradation::new(spec.kind, level)?)?;
            log::info!("{} {level}: pixel F1 {f1:.4}", spec.kind.name());
            points.push(Point { level, pixel_f1: f1 });
        }
        series.push(Series { kind: spec.kind, points });
    }
    Ok(RobustnessReport { info, baseline_pixel_f1: baseline, series })
}

impl RobustnessReport {
    pub fn point_count(&self) -> usize {
        self.series.iter().map(|s| s.points.len()).sum()
    }

    /// Writes `robustness.json`, `robustness.csv` and one two-column plot file per series.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut csv = String::from("kind,level,pixel_f1\n");
        for s in &self.series {
            for p in &s.points {
                csv += &format!("{},{},{:.6}\n", s.kind.name(), p.level, p.pixel_f1);
            }
        }
        let mut files = vec![
            (dir.join("robustness.json"), serde_json::to_string_pretty(self)? + "\n"),
            (dir.join("robustness.csv"), csv),
        ];
        for s in &self.series {
            let mut dat = format!("# level pixel_f1 ({})\n", s.kind.name());
            for p in &s.points {
                dat += &format!("{} {:.6}\n", p.level, p.pixel_f1);
            }
            files.push((dir.join(format!("plot_{}.dat", s.kind.name())), dat));
        }
        for (p, c) in &files {
            write_file(p, c)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
