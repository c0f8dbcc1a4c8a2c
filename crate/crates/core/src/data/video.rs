//! Frame-level video handling: each video contributes its first frame.
//!
//! Video manifests are line-delimited JSON records whose `frames` field names a directory of
//! frame images (sorted by file name) and whose optional `masks` directory holds per-frame masks
//! in the same order:
//! `{"frames": "v001/frames", "masks": "v001/masks", "label": "manipulated", "source": "vid"}`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::manifest::{Label, Manifest, MaskPolarity, Record};
use crate::error::{Error, Result};

const FRAME_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    frames: PathBuf,
    #[serde(default)]
    masks: Option<PathBuf>,
    label: Label,
    #[serde(default = "default_source")]
    source: String,
    #[serde(default)]
    mask_polarity: MaskPolarity,
}

fn default_source() -> String {
    "video".into()
}

fn sorted_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a video manifest and returns one record per non-empty video, in manifest order.
pub fn first_frames(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: VideoRecord = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("line {}: {e}", i + 1));
                continue;
            }
        };
        let frames_dir = root.join(&v.frames);
        let frames = match sorted_frames(&frames_dir) {
            Ok(f) => f,
            Err(e) => {
                problems.push(format!("line {}: {e}", i + 1));
                continue;
            }
        };
        let Some(first) = frames.into_iter().next() else {
            log::warn!("{}: no frames, skipped", frames_dir.display());
            continue;
        };
        let mask = match &v.masks {
            Some(dir) => match sorted_frames(&root.join(dir)) {
                Ok(m) if !m.is_empty() => Some(m[0].clone()),
                Ok(_) => {
                    problems.push(format!("line {}: mask directory {} is empty", i + 1, dir.display()));
                    None
                }
                Err(e) => {
                    problems.push(format!("line {}: {e}", i + 1));
                    None
                }
            },
            None => None,
        };
        records.push(Record { image: first, mask, label: v.label, source: v.source, mask_polarity: v.mask_polarity });
    }
    if !problems.is_empty() {
        return Err(Error::Manifest { path: path.to_path_buf(), problems });
    }
    Ok(Manifest::new(records, root))
}
