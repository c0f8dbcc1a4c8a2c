//! The assembled network: residual inputs, encoder, localization and confidence heads and
//! the detector.

use mmf_numerics::{Graph, Mode, ParamBuilder, ParamStore, Real, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionMode, Modality, ModelConfig};
use crate::decoders::{Detector, PixelDecoder};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{config, Result};
use crate::filters::BayarLayer;

pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Parameter-name prefixes of the trainable groups.
pub mod groups {
    pub const ENCODER: &str = "encoder.";
    pub const ANOMALY: &str = "anomaly.";
    pub const CONFIDENCE: &str = "confidence.";
    pub const DETECTOR: &str = "detector.";
    pub const BAYAR: &str = "bayar.";
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub bayar: Option<BayarLayer>,
    pub encoder: Encoder,
    pub anomaly: PixelDecoder,
    pub confidence: PixelDecoder,
    pub detector: Detector,
}

impl Architecture {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bayar = cfg.uses_bayar().then(|| BayarLayer::new(&mut pb.pp("bayar"), cfg.bayar_kernel));
        let encoder = Encoder::new(&mut pb.pp("encoder"), &cfg.encoder)?;
        let dims = cfg.encoder.out_dims();
        let d = &cfg.decoder;
        let anomaly = PixelDecoder::new(&mut pb.pp("anomaly"), &dims, d.embed_dim, 2, d.reweight)?;
        let confidence = PixelDecoder::new(&mut pb.pp("confidence"), &dims, d.embed_dim, 1, d.reweight)?;
        let detector = Detector::new(&mut pb.pp("detector"), d.detector_hidden);
        Ok(Self { config: cfg.clone(), bayar, encoder, anomaly, confidence, detector })
    }
}

/// Residual maps supplied from outside the graph, each `[B, 3, H, W]`.
///
/// The constrained-convolution residual is computed in the graph from the image unless an
/// override is given (used to mask that modality).
#[derive(Clone, Debug, Default)]
pub struct Residuals<T> {
    pub noiseprint: Option<Tensor<T>>,
    pub srm: Option<Tensor<T>>,
    pub bayar: Option<Tensor<T>>,
}

impl<T> Residuals<T> {
    pub fn get(&self, m: Modality) -> Option<&Tensor<T>> {
        match m {
            Modality::Noiseprint => self.noiseprint.as_ref(),
            Modality::Srm => self.srm.as_ref(),
            Modality::Bayar => self.bayar.as_ref(),
        }
    }

    pub fn set(&mut self, m: Modality, t: Option<Tensor<T>>) {
        match m {
            Modality::Noiseprint => self.noiseprint = t,
            Modality::Srm => self.srm = t,
            Modality::Bayar => self.bayar = t,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[B, 3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub residuals: Residuals<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// Localization only.
    Localization,
    /// Localization, confidence and detection.
    All,
}

pub struct Forward {
    /// `[B, 2, H, W]`; channel 1 is "manipulated".
    pub loc_logits: Var,
    /// `[B, 1, H, W]` manipulation probability.
    pub loc_prob: Var,
    /// `[B, 1, H, W]` in `(0, 1)`.
    pub confidence: Option<Var>,
    /// `[B, 1]`.
    pub det_logit: Option<Var>,
    /// `[B, 1]` integrity score.
    pub score: Option<Var>,
    pub encoder: EncoderOutput,
    /// Graph nodes of the residual inputs, in modality order of the encoder.
    pub residual_vars: Vec<Var>,
}

pub fn normalize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(config(format!("expected an RGB image, got {c} channels")));
    }
    let hw = h * w;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % 3;
        *v = (*v - T::lit(RGB_MEAN[ch])) / T::lit(RGB_STD[ch]);
    }
    Ok(out)
}

impl Architecture {
    /// Builds the forward pass. `dropout_rng` enables the per-scale dropout in front of the
    /// localization head in late fusion; it only has effect in training mode.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        input: &ModelInput<T>,
        heads: Heads,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let (_, c, h, w) = input.image.dims4()?;
        if c != 3 {
            return Err(config(format!("expected an RGB image, got {c} channels")));
        }
        let normalized = g.input(normalize(&input.image)?);
        let mut raw = None;
        let mut residual_vars = Vec::new();
        for m in self.config.encoder.modalities() {
            let v = match (m, input.residuals.get(m)) {
                (_, Some(t)) => {
                    if t.shape() != input.image.shape() {
                        return Err(config(format!("{} residual {:?} does not match image {:?}", m.name(), t.shape(), input.image.shape())));
                    }
                    g.input(t.clone())
                }
                (Modality::Bayar, None) => {
                    let layer = self.bayar.as_ref().ok_or_else(|| config("model has no constrained convolution"))?;
                    let r = *raw.get_or_insert_with(|| g.input(input.image.clone()));
                    layer.forward(g, r)?
                }
                (m, None) => return Err(config(format!("missing {} residual", m.name()))),
            };
            residual_vars.push(v);
        }
        let encoder = self.encoder.forward(g, normalized, &residual_vars)?;

        let mut feats = encoder.features.clone();
        let p = self.config.encoder.dropout;
        if let (Some(rng), Mode::Train, FusionMode::Late) = (dropout_rng, g.mode(), self.config.encoder.fusion) {
            if p > 0.0 {
                for f in &mut feats {
                    let shape = g.shape(*f).to_vec();
                    let keep = T::lit(1.0 / (1.0 - p));
                    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
                    let m = g.constant(mask);
                    *f = g.mul(*f, m)?;
                }
            }
        }
        let loc_logits = self.anomaly.forward(g, &feats, h, w)?;
        let probs = g.softmax(loc_logits, 1)?;
        let loc_prob = g.narrow(probs, 1, 1, 1)?;

        let (confidence, det_logit, score) = match heads {
            Heads::Localization => (None, None, None),
            Heads::All => {
                let cl = self.confidence.forward(g, &encoder.features, h, w)?;
                let conf = g.sigmoid(cl);
                let pooled = Detector::pool(g, loc_prob, conf)?;
                let logit = self.detector.forward(g, pooled)?;
                let score = g.sigmoid(logit);
                (Some(conf), Some(logit), Some(score))
            }
        };
        Ok(Forward { loc_logits, loc_prob, confidence, det_logit, score, encoder, residual_vars })
    }
}

/// Architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

/// Per-image outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, 1, H, W]`.
    pub localization: Tensor<f32>,
    pub confidence: Tensor<f32>,
    /// One score per image.
    pub scores: Vec<f32>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            Architecture::new(&mut pb, cfg)?
        };
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn param_count(&self) -> usize {
        self.store.weight_count()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.store.iter().filter(|(_, p)| p.name.starts_with(prefix) && p.kind == mmf_numerics::ParamKind::Weight).map(|(_, p)| p.value.numel()).sum()
    }
}

impl Model<f32> {
    /// Evaluation-mode inference through all heads.
    pub fn predict(&self, input: &ModelInput<f32>) -> Result<Prediction> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.arch.forward(&mut g, input, Heads::All, None)?;
        let conf = out.confidence.ok_or_else(|| config("confidence head missing"))?;
        let score = out.score.ok_or_else(|| config("detector missing"))?;
        Ok(Prediction {
            localization: g.value(out.loc_prob).clone(),
            confidence: g.value(conf).clone(),
            scores: g.value(score).data().to_vec(),
        })
    }
}
