//! Versioned checkpoint files.
//!
//! Layout: the 8 bytes `MMFCKPT\0`, a little-endian `u32` format version, a `u64` header length,
//! a UTF-8 JSON header, then raw little-endian `f32` data: every parameter in header order,
//! followed by the momentum buffer of every parameter whose header entry has `velocity: true`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use mmf_numerics::{ParamKind, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"MMFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Phase1,
    Phase2,
    BayarPretrain,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::BayarPretrain => "bayar_pretrain",
        }
    }
}

/// Position of a reproducible random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: crate::config::hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed random state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Where a training run stopped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total_steps: usize,
    pub epoch: usize,
    pub cursor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
    pub frozen: bool,
    pub decay: bool,
    pub velocity: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub phase: Phase,
    pub config: RunConfig,
    pub progress: Progress,
    pub rng: Option<RngState>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Tensor<f32>>,
    pub velocity: Vec<Option<Tensor<f32>>>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model<f32>,
        velocity: &[Option<Tensor<f32>>],
        phase: Phase,
        config: &RunConfig,
        progress: Progress,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        let mut params = Vec::with_capacity(model.store.len());
        let mut values = Vec::with_capacity(model.store.len());
        let mut vel = Vec::with_capacity(model.store.len());
        for (id, p) in model.store.iter() {
            let v = velocity.get(id.0).cloned().flatten();
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                buffer: p.kind == ParamKind::Buffer,
                frozen: p.frozen,
                decay: p.decay,
                velocity: v.is_some(),
            });
            values.push(p.value.clone());
            vel.push(v);
        }
        let mut config = config.clone();
        config.model = model.config().clone();
        Self { header: Header { phase, config, progress, rng: rng.map(RngState::capture), params }, values, velocity: vel }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 16 + self.values.iter().map(|t| t.numel() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(header.len() as u64).expect("vec write");
        out.extend_from_slice(&header);
        for t in self.values.iter().chain(self.velocity.iter().flatten()) {
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated file"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated file"))? as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated tensor data"))?;
            Ok(Tensor::new(shape, data)?)
        };
        let values = header.params.iter().map(|p| read_tensor(&p.shape)).collect::<Result<Vec<_>>>()?;
        let velocity = header
            .params
            .iter()
            .map(|p| if p.velocity { read_tensor(&p.shape).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { header, values, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_id(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, content_id(&bytes)))
    }

    /// Rebuilds the model described by the stored configuration and fills in the stored values.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(&self.header.config.model, 0)?;
        self.restore_into(&mut m, "")?;
        Ok(m)
    }

    /// Copies the stored parameters whose name starts with `prefix` into `model`, including
    /// frozen flags. Names and shapes must match.
    pub fn restore_into(&self, model: &mut Model<f32>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        let selected: Vec<usize> = (0..self.header.params.len()).filter(|&i| self.header.params[i].name.starts_with(prefix)).collect();
        if prefix.is_empty() && selected.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                selected.len(),
                model.store.len()
            )));
        }
        for i in selected {
            let e = &self.header.params[i];
            let id = model.store.find(&e.name).ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", e.name)))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{}: stored shape {:?}, model shape {:?}", e.name, e.shape, p.value.shape())));
            }
            p.value = self.values[i].clone();
            p.frozen = e.frozen;
            n += 1;
        }
        Ok(n)
    }

    /// Momentum buffers laid out by the model's parameter ids.
    pub fn velocity_for(&self, model: &Model<f32>) -> Vec<Option<Tensor<f32>>> {
        let mut out = vec![None; model.store.len()];
        for (e, v) in self.header.params.iter().zip(&self.velocity) {
            if let (Some(id), Some(v)) = (model.store.find(&e.name), v) {
                out[id.0] = Some(v.clone());
            }
        }
        out
    }
}

/// First 16 hex digits of the SHA-256 of the file contents.
pub fn content_id(bytes: &[u8]) -> String {
    crate::config::hex(&Sha256::digest(bytes))[..16].to_string()
}

/// Hash of the values of all parameters whose name starts with one of `prefixes`.
pub fn param_hash(model: &Model<f32>, prefixes: &[&str]) -> String {
    let mut h = Sha256::new();
    for (_, p) in model.store.iter() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    crate::config::hex(&h.finalize())
}
