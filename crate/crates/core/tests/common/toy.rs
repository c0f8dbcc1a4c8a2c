use std::path::Path;

use mmfusion::config::{Profile, RunConfig};
use mmfusion::data::manifest::Manifest;
use mmfusion::data::synthetic::{write_corpus, CorpusKind, CorpusSpec};
use mmfusion::FusionMode;

/// Small generated corpus written under `dir`.
pub fn corpus(dir: &Path, kind: CorpusKind, count: usize, size: usize, seed: u64) -> Manifest {
    let spec = CorpusSpec { count, size, ..CorpusSpec::toy(kind, seed) };
    write_corpus(&spec, dir).unwrap()
}

/// Toy run configuration shrunk to 32-pixel crops and batches of four.
pub fn small_config(fusion: FusionMode, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::for_profile(Profile::Toy);
    cfg.model.encoder.fusion = fusion;
    cfg.train.crop = 32;
    cfg.train.effective_batch = 4;
    cfg.train.physical_batch = 4;
    cfg.train.phase1_steps = Some(steps);
    cfg.train.phase2_steps = Some(steps);
    cfg
}
