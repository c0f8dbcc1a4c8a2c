//! The two-phase training loop.
//!
//! Phase 1 trains the encoder and the localization head; phase 2 freezes them and trains the
//! confidence head and the detector. The constrained-convolution pretraining run is phase 1 on
//! a single-residual model using that filter.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::GrayImage;
use mmf_numerics::{GradStore, Graph, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{self, AugmentParams};
use super::checkpoint::{Checkpoint, Phase, Progress};
use super::losses::{self, ClassWeights};
use super::optim::{Sgd, SgdConfig};
use super::sampler;
use super::schedule::poly_lr;
use crate::config::{FusionMode, Modality, NoiseprintProvider, RunConfig};
use crate::data::ingest::{load_rgb, mask_to_tensor, rgb_to_tensor};
use crate::data::Manifest;
use crate::error::{config, Error, Result};
use crate::filters::Extractor;
use crate::model::{groups, Heads, Model, ModelInput};

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: BTreeMap<&'static str, f64>,
}

/// Mixes several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn phase_tag(p: Phase) -> u64 {
    match p {
        Phase::Init => 0,
        Phase::Phase1 => 1,
        Phase::Phase2 => 2,
        Phase::BayarPretrain => 3,
    }
}

/// A decoded, augmented training example.
pub struct Example {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub label: f64,
    pub index: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub phase: Phase,
    pub model: Model<f32>,
    pub opt: Sgd<f32>,
    /// Drives dropout masks and degenerate-filter re-draws.
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    manifest: Manifest,
    extractor: Extractor,
    sources: BTreeMap<String, Vec<usize>>,
    order: Vec<usize>,
    bayar_trainable: bool,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    /// Prepares a run starting from `model`; freezes parameter groups according to `phase`.
    pub fn new(config: &RunConfig, phase: Phase, mut model: Model<f32>, manifest: Manifest) -> Result<Self> {
        config.validate()?;
        if phase == Phase::Init {
            return Err(config_err("cannot train the init phase"));
        }
        let enc = &model.config().encoder;
        if phase == Phase::BayarPretrain && !(enc.fusion == FusionMode::Single && enc.single_aux == Modality::Bayar) {
            return Err(config_err("constrained-filter pretraining needs a single-residual model using that filter"));
        }
        if config.train.augment && matches!(config.residuals.noiseprint, NoiseprintProvider::Precomputed { .. }) {
            return Err(config_err("precomputed noise residuals cannot follow random rescaling; disable augmentation"));
        }
        let need_masks = true;
        manifest.validate(need_masks).map_err(|problems| Error::Manifest { path: manifest.root.clone(), problems })?;
        let bayar_trainable = matches!(phase, Phase::Phase1 | Phase::BayarPretrain) && enc.fusion == FusionMode::Single;
        let store = &mut model.store;
        match phase {
            Phase::Phase1 | Phase::BayarPretrain => {
                store.set_frozen("", false);
                store.set_frozen(groups::CONFIDENCE, true);
                store.set_frozen(groups::DETECTOR, true);
                store.set_frozen(groups::BAYAR, !bayar_trainable);
            }
            Phase::Phase2 => {
                store.set_frozen("", true);
                store.set_frozen(groups::CONFIDENCE, false);
                store.set_frozen(groups::DETECTOR, false);
            }
            Phase::Init => unreachable!(),
        }
        let extractor = Extractor::new(&config.residuals, &model.config().encoder.modalities())?;
        let t = &config.train;
        let opt = Sgd::new(SgdConfig { momentum: t.momentum, weight_decay: t.weight_decay }, model.store.len());
        let sources = manifest.by_source();
        let mut me = Self {
            config: config.clone(),
            phase,
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, phase_tag(phase), 0xD0]),),
            progress: Progress::default(),
            manifest,
            extractor,
            sources,
            order: Vec::new(),
            bayar_trainable,
            log: None,
        };
        me.progress.total_steps = me.planned_steps()?;
        me.order = me.epoch_order(0)?;
        Ok(me)
    }

    /// Continues a run from a checkpoint of the same phase.
    pub fn resume(ckpt: &Checkpoint, manifest: Manifest) -> Result<Self> {
        let model = ckpt.model()?;
        let mut me = Self::new(&ckpt.header.config, ckpt.header.phase, model, manifest)?;
        me.opt.velocity = ckpt.velocity_for(&me.model);
        if let Some(r) = &ckpt.header.rng {
            me.rng = r.restore()?;
        }
        me.progress = ckpt.header.progress.clone();
        me.order = me.epoch_order(me.progress.epoch)?;
        Ok(me)
    }

    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(self)
    }

    fn planned_steps(&self) -> Result<usize> {
        let t = &self.config.train;
        let explicit = match self.phase {
            Phase::Phase2 => t.phase2_steps,
            _ => t.phase1_steps,
        };
        if let Some(s) = explicit {
            return Ok(s);
        }
        let smallest = self.sources.values().map(Vec::len).min().unwrap_or(0);
        let per_epoch = t.epoch_quota.unwrap_or(smallest) * self.sources.len();
        Ok((per_epoch.div_ceil(t.effective_batch)).max(1) * t.epochs)
    }

    fn epoch_order(&self, epoch: usize) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, phase_tag(self.phase), 0xE0, epoch as u64]));
        sampler::epoch(&self.sources, self.config.train.epoch_quota, self.config.train.sample_with_replacement, &mut rng)
    }

    fn next_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.progress.cursor >= self.order.len() {
                self.progress.epoch += 1;
                self.progress.cursor = 0;
                self.order = self.epoch_order(self.progress.epoch)?;
            }
            out.push(self.order[self.progress.cursor]);
            self.progress.cursor += 1;
        }
        Ok(out)
    }

    /// Loads and augments one record with a generator seeded by its position in the stream.
    pub fn example(&self, index: usize, position: u64) -> Result<Example> {
        let rec = &self.manifest.records[index];
        let img = load_rgb(&rec.image)?;
        let mask = match rec.load_mask()? {
            Some(m) => m,
            None if rec.label.is_manipulated() => {
                return Err(config_err(format!("manipulated image {} has no mask", rec.image.display())))
            }
            None => GrayImage::new(img.width(), img.height()),
        };
        if mask.dimensions() != img.dimensions() {
            return Err(Error::Decode {
                path: rec.mask.clone().unwrap_or_default(),
                reason: format!("mask is {:?} but the image is {:?}", mask.dimensions(), img.dimensions()),
            });
        }
        let t = &self.config.train;
        let crop = t.crop as u32;
        let (img, mask) = if t.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, phase_tag(self.phase), position]));
            let p = AugmentParams::sample(t, img.dimensions(), &mut rng);
            augment::apply(&img, &mask, crop, &p)?
        } else {
            augment::crop_only(&img, &mask, crop, None)
        };
        Ok(Example { image: rgb_to_tensor(&img), mask: mask_to_tensor(&mask), label: f64::from(u8::from(rec.label.is_manipulated())), index })
    }

    fn batch_input(&self, chunk: &[Example]) -> Result<(ModelInput<f32>, Tensor<f32>)> {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|e| e.image.clone()).collect();
        let paths: Vec<Option<&Path>> = chunk.iter().map(|e| Some(self.manifest.records[e.index].image.as_path())).collect();
        let residuals = self.extractor.extract_batch(&images, &paths)?;
        let masks: Vec<Tensor<f32>> = chunk.iter().map(|e| e.mask.clone()).collect();
        Ok((ModelInput { image: Tensor::stack(&images)?, residuals }, Tensor::stack(&masks)?))
    }

    /// Runs one optimizer step over one effective batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.config.train.clone();
        let start = self.progress.cursor as u64 + self.progress.epoch as u64 * 1_000_003;
        let ids = self.next_indices(t.effective_batch)?;
        let examples = ids
            .iter()
            .enumerate()
            .map(|(k, &i)| self.example(i, start * 4099 + k as u64))
            .collect::<Result<Vec<_>>>()?;
        let batch_desc = || format!("epoch {} records {:?}", self.progress.epoch, ids);
        let weights = ClassWeights::from_masks(examples.iter().map(|e| &e.mask));
        let pixels: usize = examples.iter().map(|e| e.mask.numel()).sum();
        let mut grads = GradStore::for_store(&self.model.store);
        let mut parts: BTreeMap<&'static str, f64> = BTreeMap::new();
        let phase2 = self.phase == Phase::Phase2;
        for chunk in examples.chunks(t.physical_batch) {
            let (input, mask) = self.batch_input(chunk)?;
            let mut g = Graph::new(&self.model.store, Mode::Train);
            let (loss, chunk_parts) = if phase2 {
                let out = self.model.arch.forward(&mut g, &input, Heads::All, None)?;
                let tcp = losses::true_class_probability(g.value(out.loc_prob), &mask)?;
                let conf = out.confidence.ok_or_else(|| config_err("confidence head missing"))?;
                let logit = out.det_logit.ok_or_else(|| config_err("detector missing"))?;
                let lc = losses::confidence(&mut g, conf, &tcp, pixels)?;
                let labels: Vec<f64> = chunk.iter().map(|e| e.label).collect();
                let ld = losses::detection(&mut g, logit, &labels, examples.len())?;
                let total = g.add(lc, ld)?;
                let p = [("confidence", g.value(lc).data()[0] as f64), ("detection", g.value(ld).data()[0] as f64)];
                (total, p.to_vec())
            } else {
                let out = self.model.arch.forward(&mut g, &input, Heads::Localization, Some(&mut self.rng))?;
                let l = losses::localization(&mut g, out.loc_logits, &mask, weights)?;
                (l, vec![("localization", g.value(l).data()[0] as f64)])
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.progress.step, batch: batch_desc(), loss: value });
            }
            let gr = g.backward(loss)?;
            for (id, gt) in gr.params.iter() {
                grads.accumulate(id, gt);
            }
            let updates = g.take_buffer_updates();
            drop(g);
            self.model.store.apply_buffer_updates(updates);
            for (k, v) in chunk_parts {
                *parts.entry(k).or_default() += v;
            }
        }
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step: self.progress.step, batch: batch_desc(), loss: f64::NAN });
        }
        let lr0 = if phase2 { t.phase2_lr0.unwrap_or(t.lr0) } else { t.lr0 };
        let lr = poly_lr(self.progress.step, self.progress.total_steps, lr0, t.poly_power);
        self.opt.step(&mut self.model.store, &grads, lr);
        if self.bayar_trainable {
            if let Some(b) = &self.model.arch.bayar {
                b.project_in(&mut self.model.store, &mut self.rng);
                if t.check_bayar {
                    b.check_in(&self.model.store)?;
                }
            }
        }
        let rec = StepRecord { step: self.progress.step, epoch: self.progress.epoch, lr, loss: parts.values().sum(), parts };
        self.progress.step += 1;
        if let Some(log) = &mut self.log {
            let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
            let line = serde_json::json!({ "record": &rec, "unix_ms": ms });
            writeln!(log, "{line}").map_err(|e| Error::io(PathBuf::from("<training log>"), e))?;
        }
        Ok(rec)
    }

    /// Steps until the planned total, calling `observe` after each step.
    pub fn run(&mut self, mut observe: impl FnMut(&StepRecord, &Model<f32>) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while self.progress.step < self.progress.total_steps {
            let rec = self.step()?;
            log::info!("{} step {}/{} lr {:.5} loss {:.5}", self.phase.name(), rec.step + 1, self.progress.total_steps, rec.lr, rec.loss);
            observe(&rec, &self.model)?;
            out.push(rec);
        }
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| Error::io(PathBuf::from("<training log>"), e))?;
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.opt.velocity, self.phase, &self.config, self.progress.clone(), Some(&self.rng))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    config(msg)
}
