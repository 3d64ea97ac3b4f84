//! Binary checkpoint container.
//!
//! Layout (little-endian): `MINDCKPT`, u32 version, u32 tensor count, then per
//! tensor u32 name length, UTF-8 name, u32 rank, u32 per dimension and f32
//! payload; finally u64 metadata length and the metadata as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::backbone::MindModel;
use crate::error::{MindError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MINDCKPT";
pub const VERSION: u32 = 1;
pub const ADAM_M: &str = "adam.m.";
pub const ADAM_V: &str = "adam.v.";
pub const DISC: &str = "disc.";
pub const DISC_ADAM_M: &str = "disc_adam.m.";
pub const DISC_ADAM_V: &str = "disc_adam.v.";

/// Describes how per-step randomness is derived; nothing else needs saving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub adam_t: u64,
    pub disc_adam_t: u64,
    pub best_loss: Option<f64>,
    pub config: RunConfig,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

fn is_aux(name: &str) -> bool {
    [ADAM_M, ADAM_V, DISC, DISC_ADAM_M, DISC_ADAM_V]
        .iter()
        .any(|p| name.starts_with(p))
}

fn with_prefix(store: &ParamStore<f32>, prefix: &str) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.insert(rest.to_string(), v.clone());
        }
    }
    out
}

impl Checkpoint {
    /// Network parameters only.
    pub fn model_params(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (k, v) in self.tensors.iter() {
            if !is_aux(k) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    pub fn adam_moments(&self) -> (ParamStore<f32>, ParamStore<f32>) {
        (with_prefix(&self.tensors, ADAM_M), with_prefix(&self.tensors, ADAM_V))
    }

    /// Discriminator weights (keys keep their `disc.` prefix).
    pub fn discriminator(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (k, v) in self.tensors.iter() {
            if k.starts_with(DISC) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    pub fn disc_moments(&self) -> (ParamStore<f32>, ParamStore<f32>) {
        (with_prefix(&self.tensors, DISC_ADAM_M), with_prefix(&self.tensors, DISC_ADAM_V))
    }

    pub fn model(&self) -> Result<MindModel> {
        let c = &self.meta.config;
        MindModel::with_params(c.model.clone(), c.flags, c.loss.clone(), self.model_params())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(MindError::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(MindError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| MindError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| MindError::Format("tensor too large".into()))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        let len = r.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| MindError::Format(format!("checkpoint metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(MindError::Format("trailing bytes after checkpoint metadata".into()));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MindError::Size(format!(
                "checkpoint truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Checkpoint holding freshly initialized weights for `cfg`.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = MindModel::new(cfg.model.clone(), cfg.flags, cfg.loss.clone(), cfg.seed)?;
    Ok(Checkpoint {
        tensors: model.params,
        meta: CheckpointMeta {
            step: 0,
            epoch: 0,
            adam_t: 0,
            disc_adam_t: 0,
            best_loss: None,
            config: cfg.clone(),
            rng: RngState {
                algorithm: super::RNG_ALGORITHM.into(),
                seed: cfg.seed,
                next_step: 0,
            },
        },
    })
}
