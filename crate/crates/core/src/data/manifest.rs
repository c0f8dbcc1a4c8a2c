//! Line-delimited JSON dataset manifests.
//!
//! One record per line:
//! `{"image": "a.png", "mask": "a_gt.png", "label": "manipulated", "source": "casia", "mask_polarity": "manipulated_white"}`.
//! Relative paths resolve against the manifest's directory. `mask` is optional for authentic
//! images; `mask_polarity` defaults to `manipulated_white`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Authentic,
    Manipulated,
}

impl Label {
    pub fn is_manipulated(self) -> bool {
        self == Label::Manipulated
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolarity {
    #[default]
    ManipulatedWhite,
    AuthenticWhite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub label: Label,
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default, skip_serializing_if = "is_default_polarity")]
    pub mask_polarity: MaskPolarity,
}

fn default_source() -> String {
    "default".into()
}

fn is_default_polarity(p: &MaskPolarity) -> bool {
    *p == MaskPolarity::ManipulatedWhite
}

impl Record {
    pub fn load_mask(&self) -> Result<Option<image::GrayImage>> {
        self.mask
            .as_deref()
            .map(|p| super::ingest::load_mask(p, self.mask_polarity == MaskPolarity::AuthenticWhite))
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub authentic: usize,
    pub manipulated: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory that relative paths were resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>, root: impl Into<PathBuf>) -> Self {
        Self { records, root: root.into() }
    }

    /// Parses and validates a manifest. `need_masks` refuses manipulated records without masks.
    pub fn load(path: &Path, need_masks: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, &root).map_err(|problems| Error::Manifest { path: path.to_path_buf(), problems })?;
        m.validate(need_masks).map_err(|problems| Error::Manifest { path: path.to_path_buf(), problems })?;
        let c = m.counts();
        log::info!("{}: {} records ({} authentic, {} manipulated)", path.display(), m.len(), c.authentic, c.manipulated);
        Ok(m)
    }

    pub fn parse(text: &str, root: &Path) -> std::result::Result<Self, Vec<String>> {
        let mut records = Vec::new();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match serde_json::from_str::<Record>(line) {
                Ok(mut r) => {
                    r.image = root.join(&r.image);
                    r.mask = r.mask.map(|m| root.join(m));
                    records.push(r);
                }
                Err(e) => problems.push(format!("line {}: {e}", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(Self { records, root: root.to_path_buf() })
        } else {
            Err(problems)
        }
    }

    /// Checks every path up front so a run never fails mid-epoch on a missing file.
    pub fn validate(&self, need_masks: bool) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut seen: HashMap<&Path, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            *seen.entry(&r.image).or_default() += 1;
            if !r.image.is_file() {
                problems.push(format!("record {}: image {} does not exist", i + 1, r.image.display()));
            }
            match &r.mask {
                Some(m) if !m.is_file() => problems.push(format!("record {}: mask {} does not exist", i + 1, m.display())),
                None if need_masks && r.label.is_manipulated() => {
                    problems.push(format!("record {}: manipulated image {} has no mask", i + 1, r.image.display()))
                }
                _ => {}
            }
        }
        let dups: usize = seen.values().filter(|&&n| n > 1).map(|n| n - 1).sum();
        if dups > 0 {
            log::warn!("manifest lists {dups} duplicate image paths");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn duplicate_count(&self) -> usize {
        let mut seen: HashMap<&Path, usize> = HashMap::new();
        for r in &self.records {
            *seen.entry(&r.image).or_default() += 1;
        }
        seen.values().filter(|&&n| n > 1).map(|n| n - 1).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> Counts {
        let manipulated = self.records.iter().filter(|r| r.label.is_manipulated()).count();
        Counts { authentic: self.len() - manipulated, manipulated }
    }

    /// Record indices grouped by source tag, in tag order.
    pub fn by_source(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.source.clone()).or_default().push(i);
        }
        out
    }

    /// Writes the records with paths relative to `dir` where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = Vec::new();
        for r in &self.records {
            let mut r = r.clone();
            r.image = relative(&r.image, &dir);
            r.mask = r.mask.map(|m| relative(&m, &dir));
            serde_json::to_writer(&mut out, &r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

fn relative(p: &Path, dir: &Path) -> PathBuf {
    p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}
