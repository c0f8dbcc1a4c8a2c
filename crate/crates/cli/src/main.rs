//! Command-line front end: corpus generation, the training phases, evaluation, robustness
//! sweeps, modality-masking explanations and single-image prediction.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::GrayImage;
use mmfusion::config::{FusionMode, Modality, Profile, RunConfig};
use mmfusion::data::synthetic::{write_corpus, CorpusKind, CorpusSpec};
use mmfusion::data::{video, Manifest};
use mmfusion::evaluation::degrade::{Degradation, DegradationKind, DegradationSpec};
use mmfusion::evaluation::{evaluate, explain, sweep, MaskMode, MaskSpec, RunInfo};
use mmfusion::model::groups;
use mmfusion::predict::Predictor;
use mmfusion::training::{Checkpoint, Phase, Trainer};
use mmfusion::Model;

#[derive(Parser)]
#[command(name = "mmfusion", version, about = "Multi-modal image manipulation localization and detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML); missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// JSONL manifest of images, masks, labels and sources.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory (or file for `video-frames`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "toy")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and localization decoder.
    TrainPhase1 {
        /// Copy constrained-filter weights from a pretraining checkpoint.
        #[arg(long)]
        bayar_from: Option<PathBuf>,
        /// Continue an interrupted phase-1 run from --checkpoint.
        #[arg(long)]
        resume: bool,
        /// Also write a checkpoint every N steps.
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Train confidence and detection heads on a frozen phase-1 model.
    TrainPhase2 {
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Train a single-residual model on the constrained filter to obtain its weights.
    PretrainBayar {
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Metrics over a manifest.
    Eval {
        /// Optional degradation, e.g. `jpeg:70` or `gaussian_blur:5`.
        #[arg(long)]
        degrade: Option<String>,
    },
    /// Localization F1 under blur and JPEG levels.
    Robustness {
        #[arg(long, value_delimiter = ',')]
        blur_levels: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        jpeg_levels: Option<Vec<u32>>,
    },
    /// Mask one residual input and measure the change in localization.
    Explain {
        #[arg(long)]
        mask_modality: String,
        /// zeros, random_image or self.
        #[arg(long, default_value = "zeros")]
        mask_mode: String,
        /// Manifest whose authentic images supply random_image replacements.
        #[arg(long)]
        pristine_pool: Option<PathBuf>,
        /// Score against the unmasked prediction instead of ground truth.
        #[arg(long)]
        blind: bool,
    },
    /// Localization map, confidence map and detection score for images.
    Predict {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write a synthetic corpus with masks and a manifest.
    MakeSynthetic {
        #[arg(long, default_value = "splice")]
        kind: String,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        manipulated: f64,
        #[arg(long, default_value_t = 3.0)]
        edge_amplitude: f64,
    },
    /// Turn a video manifest into a first-frame image manifest.
    VideoFrames,
}

impl Global {
    fn profile(&self) -> Result<Profile> {
        Ok(self.profile.parse()?)
    }

    fn run_config(&self) -> Result<RunConfig> {
        let profile = self.profile()?;
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, profile)?,
            None => RunConfig::for_profile(profile),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn manifest(&self, need_masks: bool) -> Result<Manifest> {
        let p = self.manifest.as_deref().context("--manifest is required")?;
        Ok(Manifest::load(p, need_masks)?)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }

    fn checkpoint(&self) -> Result<(Checkpoint, String)> {
        let p = self.checkpoint.as_deref().context("--checkpoint is required")?;
        Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))
    }

    /// Predictor from the checkpoint; `--config` only overrides the residual sources.
    fn predictor(&self) -> Result<(Predictor, RunConfig)> {
        let (ckpt, id) = self.checkpoint()?;
        let mut cfg = ckpt.header.config.clone();
        if self.config.is_some() {
            cfg.residuals = self.run_config()?.residuals;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let predictor = Predictor::new(ckpt.model()?, &cfg.residuals, id)?;
        Ok((predictor, cfg))
    }

    fn run_info(&self, predictor: &Predictor, cfg: &RunConfig) -> RunInfo {
        RunInfo::new(cfg.hash(), predictor.checkpoint_id.clone(), cfg.seed, predictor.extractor.noiseprint.label())
    }
}

fn train(trainer: Trainer, out: &Path, save_every: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), trainer.config.to_toml())?;
    let mut trainer = trainer.with_log(&out.join("train_log.jsonl"))?;
    let final_path = out.join("checkpoint.mmfc");
    if let Some(every) = save_every.filter(|&n| n > 0) {
        while trainer.progress.step < trainer.progress.total_steps {
            let rec = trainer.step()?;
            log::info!("step {}/{} loss {:.5}", rec.step + 1, trainer.progress.total_steps, rec.loss);
            if (rec.step + 1) % every == 0 {
                let id = trainer.checkpoint().save(&final_path)?;
                log::info!("saved {} ({id})", final_path.display());
            }
        }
    } else {
        trainer.run(|_, _| Ok(()))?;
    }
    let id = trainer.checkpoint().save(&final_path)?;
    println!("{} {id}", final_path.display());
    Ok(())
}

fn parse_degradation(s: &str) -> Result<Degradation> {
    let (kind, level) = s.split_once(':').context("degradation must look like kind:level")?;
    let kind = match kind {
        "gaussian_blur" | "blur" => DegradationKind::GaussianBlur,
        "jpeg" => DegradationKind::Jpeg,
        other => bail!("unknown degradation {other:?} (gaussian_blur, jpeg)"),
    };
    Ok(Degradation::new(kind, level.parse()?)?)
}

fn save_map(t: &mmfusion::numerics::Tensor<f32>, h: usize, w: usize, path: &Path) -> Result<()> {
    let px: Vec<u8> = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::from_raw(w as u32, h as u32, px).context("map size")?.save(path)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::TrainPhase1 { bayar_from, resume, save_every } => {
            let manifest = g.manifest(true)?;
            let trainer = if *resume {
                let (ckpt, _) = g.checkpoint()?;
                if ckpt.header.phase != Phase::Phase1 {
                    bail!("--resume needs a phase-1 checkpoint, got {}", ckpt.header.phase.name());
                }
                Trainer::resume(&ckpt, manifest)?
            } else {
                let cfg = g.run_config()?;
                let mut model = Model::new(&cfg.model, cfg.seed)?;
                if let Some(p) = bayar_from {
                    let (src, _) = Checkpoint::load(p)?;
                    let n = src.restore_into(&mut model, groups::BAYAR)?;
                    log::info!("imported {n} constrained-filter tensors from {}", p.display());
                }
                Trainer::new(&cfg, Phase::Phase1, model, manifest)?
            };
            train(trainer, g.out()?, *save_every)
        }
        Command::TrainPhase2 { save_every } => {
            let manifest = g.manifest(true)?;
            let (ckpt, _) = g.checkpoint()?;
            let trainer = match ckpt.header.phase {
                Phase::Phase2 => Trainer::resume(&ckpt, manifest)?,
                Phase::Phase1 => {
                    let mut cfg = ckpt.header.config.clone();
                    if g.config.is_some() {
                        cfg.train = g.run_config()?.train;
                    }
                    Trainer::new(&cfg, Phase::Phase2, ckpt.model()?, manifest)?
                }
                other => bail!("phase 2 starts from a phase-1 checkpoint, got {}", other.name()),
            };
            train(trainer, g.out()?, *save_every)
        }
        Command::PretrainBayar { save_every } => {
            let mut cfg = g.run_config()?;
            cfg.model.encoder.fusion = FusionMode::Single;
            cfg.model.encoder.single_aux = Modality::Bayar;
            let model = Model::new(&cfg.model, cfg.seed)?;
            let trainer = Trainer::new(&cfg, Phase::BayarPretrain, model, g.manifest(true)?)?;
            train(trainer, g.out()?, *save_every)
        }
        Command::Eval { degrade } => {
            let (predictor, cfg) = g.predictor()?;
            let d = degrade.as_deref().map(parse_degradation).transpose()?.unwrap_or(Degradation::Identity);
            let report = evaluate(&predictor, &g.manifest(false)?, d, g.run_info(&predictor, &cfg))?;
            for p in report.emit(g.out()?)? {
                println!("{}", p.display());
            }
            print!("{}", report.datasets_csv());
            Ok(())
        }
        Command::Robustness { blur_levels, jpeg_levels } => {
            let (predictor, cfg) = g.predictor()?;
            let mut specs = DegradationSpec::defaults();
            if let Some(l) = blur_levels {
                specs[0].levels = l.clone();
            }
            if let Some(l) = jpeg_levels {
                specs[1].levels = l.clone();
            }
            let report = sweep(&predictor, &g.manifest(false)?, &specs, g.run_info(&predictor, &cfg))?;
            for p in report.emit(g.out()?)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Explain { mask_modality, mask_mode, pristine_pool, blind } => {
            let (predictor, cfg) = g.predictor()?;
            let pool = pristine_pool.as_deref().map(|p| Manifest::load(p, false)).transpose()?;
            let spec = MaskSpec::new(mask_modality.parse()?, mask_mode.parse::<MaskMode>()?, pool.as_ref())?;
            let report = explain(&predictor, &g.manifest(false)?, &spec, cfg.seed, *blind, g.run_info(&predictor, &cfg))?;
            for p in report.emit(g.out()?)? {
                println!("{}", p.display());
            }
            match report.delta_f1 {
                Some(d) => println!("delta_f1 {d:.6} pq {:.6}", report.pq),
                None => println!("pq {:.6}", report.pq),
            }
            Ok(())
        }
        Command::Predict { images } => {
            let (predictor, _) = g.predictor()?;
            let out = g.out()?;
            std::fs::create_dir_all(out)?;
            for path in images {
                let b = predictor.predict_path(path)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let (h, w) = (b.padding.height, b.padding.width);
                save_map(&b.localization, h, w, &out.join(format!("{stem}_localization.png")))?;
                save_map(&b.confidence, h, w, &out.join(format!("{stem}_confidence.png")))?;
                let summary = serde_json::to_string_pretty(&b.summary())?;
                std::fs::write(out.join(format!("{stem}.json")), summary + "\n")?;
                println!("{} score {:.6}", path.display(), b.score);
            }
            Ok(())
        }
        Command::MakeSynthetic { kind, count, size, manipulated, edge_amplitude } => {
            let kind: CorpusKind = kind.parse()?;
            let spec = CorpusSpec {
                kind,
                count: *count,
                size: *size,
                manipulated: *manipulated,
                seed: g.seed.unwrap_or(0),
                edge_amplitude: *edge_amplitude,
            };
            let m = write_corpus(&spec, g.out()?)?;
            println!("{} images in {}", m.len(), g.out()?.join("manifest.jsonl").display());
            Ok(())
        }
        Command::VideoFrames => {
            let m = video::first_frames(g.manifest.as_deref().context("--manifest (video JSONL) is required")?)?;
            let out = g.out()?;
            m.write(out)?;
            println!("{} first frames -> {}", m.len(), out.display());
            Ok(())
        }
    }
}
