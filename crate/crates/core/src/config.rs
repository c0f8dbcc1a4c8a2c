//! Run configuration: architecture, residual sources and optimization settings.
//!
//! A run is described by one TOML file. Every section has defaults taken from a named profile,
//! so a file may override just a few keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Noiseprint,
    Srm,
    Bayar,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Noiseprint, Modality::Srm, Modality::Bayar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Noiseprint => "noiseprint",
            Modality::Srm => "srm",
            Modality::Bayar => "bayar",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noiseprint" => Ok(Modality::Noiseprint),
            "srm" => Ok(Modality::Srm),
            "bayar" => Ok(Modality::Bayar),
            other => Err(config(format!("unknown modality {other:?} (noiseprint, srm, bayar)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One auxiliary residual next to the RGB image.
    Single,
    /// Three dual-branch encoders whose per-scale outputs are concatenated.
    Late,
    /// The three residuals are mixed by convolutional blocks into one auxiliary input.
    Early,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            other => Err(config(format!("unknown profile {other:?} (toy, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub fusion: FusionMode,
    /// Auxiliary modality for [`FusionMode::Single`].
    pub single_aux: Modality,
    /// Residual scale of the channel-wise rectification term.
    pub lambda_c: f64,
    /// Residual scale of the spatial-wise rectification term.
    pub lambda_s: f64,
    /// Fusion-module attention heads per stage.
    pub fusion_heads: [usize; 4],
    /// Disabling removes every additive bias inside the fusion module.
    pub fusion_bias: bool,
    /// Share the RGB-branch transformer weights across the three late-fusion encoders.
    pub share_rgb: bool,
    /// Dropout on late-fusion features before the anomaly decoder.
    pub dropout: f64,
    /// Output widths of the four 3×3 convolutions in each early-fusion block.
    pub efm_widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Common projection width of the MLP decoders.
    pub embed_dim: usize,
    /// Insert the feature re-weighting front-end.
    pub reweight: bool,
    pub detector_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub bayar_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseprintProvider {
    /// Fixed zero-sum Laplacian stand-in (reported as a proxy).
    Proxy,
    /// Residual files keyed by the image path relative to `root`.
    Precomputed { dir: PathBuf, root: PathBuf },
    /// No provider; requesting the residual is a configuration error.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub noiseprint: NoiseprintProvider,
    /// SRM clamp threshold in 8-bit residual units.
    pub srm_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub effective_batch: usize,
    pub physical_batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set: number of optimizer steps per phase.
    #[serde(default)]
    pub phase1_steps: Option<usize>,
    #[serde(default)]
    pub phase2_steps: Option<usize>,
    /// Learning rate of the second phase; `lr0` when unset.
    #[serde(default)]
    pub phase2_lr0: Option<f64>,
    pub crop: usize,
    pub augment: bool,
    pub scale_range: [f64; 2],
    pub jpeg_qf_range: [u8; 2],
    /// Per-source quota per epoch; the smallest source size when unset.
    #[serde(default)]
    pub epoch_quota: Option<usize>,
    pub sample_with_replacement: bool,
    /// Check the Bayar constraint after every step.
    pub check_bayar: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub residuals: ResidualConfig,
    pub train: TrainConfig,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            dims: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            fusion: FusionMode::Early,
            single_aux: Modality::Srm,
            lambda_c: 0.5,
            lambda_s: 0.5,
            fusion_heads: [1, 2, 4, 8],
            fusion_bias: true,
            share_rgb: true,
            dropout: 0.3,
            efm_widths: vec![4, 4, 8, 8],
        }
    }

    pub fn full() -> Self {
        Self {
            dims: [64, 128, 320, 512],
            depths: [3, 4, 6, 3],
            heads: [1, 2, 5, 8],
            fusion_heads: [1, 2, 5, 8],
            efm_widths: vec![24, 48, 96, 192],
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config(format!("stage dims must be strictly increasing, got {:?}", self.dims)));
        }
        for i in 0..4 {
            if self.heads[i] == 0 || self.dims[i] % self.heads[i] != 0 {
                return Err(config(format!("stage {} has {} heads for {} channels", i + 1, self.heads[i], self.dims[i])));
            }
            if self.fusion_heads[i] == 0 || self.dims[i] % self.fusion_heads[i] != 0 {
                return Err(config(format!("stage {} fusion heads {} do not divide {}", i + 1, self.fusion_heads[i], self.dims[i])));
            }
            if self.depths[i] == 0 || self.sr_ratios[i] == 0 {
                return Err(config("depths and reduction ratios must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.efm_widths.is_empty() || self.efm_widths.contains(&0) {
            return Err(config("early-fusion widths must be non-empty and positive"));
        }
        Ok(())
    }

    /// Channels of the encoder output at each scale.
    pub fn out_dims(&self) -> [usize; 4] {
        let k = if self.fusion == FusionMode::Late { 3 } else { 1 };
        self.dims.map(|d| d * k)
    }

    /// Residual modalities consumed by this encoder.
    pub fn modalities(&self) -> Vec<Modality> {
        match self.fusion {
            FusionMode::Single => vec![self.single_aux],
            FusionMode::Late | FusionMode::Early => Modality::ALL.to_vec(),
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self { embed_dim: 32, reweight: true, detector_hidden: 16 }
    }

    pub fn full() -> Self {
        Self { embed_dim: 512, reweight: true, detector_hidden: 64 }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self { encoder: EncoderConfig::toy(), decoder: DecoderConfig::toy(), bayar_kernel: 5 },
            Profile::Full => Self { encoder: EncoderConfig::full(), decoder: DecoderConfig::full(), bayar_kernel: 5 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.bayar_kernel % 2 == 0 || self.bayar_kernel < 3 {
            return Err(config(format!("bayar kernel must be odd and at least 3, got {}", self.bayar_kernel)));
        }
        if self.decoder.embed_dim == 0 || self.decoder.detector_hidden == 0 {
            return Err(config("decoder widths must be positive"));
        }
        Ok(())
    }

    pub fn uses_bayar(&self) -> bool {
        self.encoder.modalities().contains(&Modality::Bayar)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { noiseprint: NoiseprintProvider::Proxy, srm_threshold: 2.0 }
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            lr0: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            effective_batch: 24,
            physical_batch: 8,
            epochs: 100,
            phase1_steps: None,
            phase2_steps: None,
            phase2_lr0: None,
            crop: 512,
            augment: true,
            scale_range: [0.5, 1.5],
            jpeg_qf_range: [30, 100],
            epoch_quota: None,
            sample_with_replacement: false,
            check_bayar: false,
        }
    }

    /// CPU-minute preset for the synthetic corpus. Augmentation is off because the target is
    /// fitting the training set itself.
    pub fn toy() -> Self {
        Self {
            lr0: 0.03,
            effective_batch: 8,
            physical_batch: 8,
            phase1_steps: Some(900),
            phase2_steps: Some(150),
            phase2_lr0: Some(0.05),
            crop: 64,
            augment: false,
            ..Self::full()
        }
    }

    pub fn accumulation(&self) -> usize {
        self.effective_batch / self.physical_batch
    }

    pub fn validate(&self) -> Result<()> {
        if self.physical_batch == 0 || self.effective_batch % self.physical_batch != 0 || self.effective_batch == 0 {
            return Err(config(format!(
                "effective batch {} must be a positive multiple of physical batch {}",
                self.effective_batch, self.physical_batch
            )));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(config(format!("scale range {:?} is not well ordered", self.scale_range)));
        }
        if !(1 <= self.jpeg_qf_range[0] && self.jpeg_qf_range[0] <= self.jpeg_qf_range[1] && self.jpeg_qf_range[1] <= 100) {
            return Err(config(format!("JPEG quality range {:?} is not within 1..=100", self.jpeg_qf_range)));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(config(format!("crop {} must be a positive multiple of 32", self.crop)));
        }
        if self.lr0 <= 0.0 || self.poly_power <= 0.0 {
            return Err(config("learning rate and poly power must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Toy => TrainConfig::toy(),
            Profile::Full => TrainConfig::full(),
        };
        Self { profile, seed: 0, model: ModelConfig::for_profile(profile), residuals: ResidualConfig::default(), train }
    }

    /// Parses a TOML file. Keys missing from the file take the defaults of its `profile`
    /// (or of `fallback` when the file names no profile).
    pub fn from_toml(text: &str, fallback: Profile) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| config(format!("run config: {e}")))?;
        let profile = match raw.get("profile").and_then(|v| v.as_str()) {
            Some(p) => p.parse()?,
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| config(e.to_string()))?;
        merge(&mut base, raw);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, fallback)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.residuals.srm_threshold <= 0.0 {
            return Err(config("SRM threshold must be positive"));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "noiseprint" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_overrides_profile_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[model.encoder]\nfusion = \"late\"\n", Profile::Toy).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.encoder.fusion, FusionMode::Late);
        assert_eq!(cfg.model.encoder.dims, [16, 32, 64, 128]);
        let full = RunConfig::from_toml("profile = \"full\"", Profile::Toy).unwrap();
        assert_eq!(full.model.encoder.dims, [64, 128, 320, 512]);
        assert_eq!(full.train.lr0, 0.005);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::for_profile(Profile::Full);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), Profile::Toy).unwrap(), cfg);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(RunConfig::from_toml("[model.encoder]\nheads = [3, 2, 4, 8]", Profile::Toy).is_err());
        assert!(RunConfig::from_toml("[model.encoder]\ndims = [16, 16, 64, 128]", Profile::Toy).is_err());
        assert!(RunConfig::from_toml("[train]\neffective_batch = 10\nphysical_batch = 4", Profile::Toy).is_err());
        assert!(RunConfig::from_toml("[train]\njpeg_qf_range = [90, 30]", Profile::Toy).is_err());
        assert!(RunConfig::from_toml("[model]\nunknown = 1", Profile::Toy).is_err());
    }
}
