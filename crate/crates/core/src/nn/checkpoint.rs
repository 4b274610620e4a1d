//! Checkpoint file: `SPCK`, version, 32-byte model config hash, record count,
//! then records sorted by name: name length (u32), name, rank (u32), dims
//! (u64 each), f32 payload.

use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Sorted by name.
    pub tensors: Vec<(String, Tensor)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, cfg: &ModelConfig) -> Result<Self> {
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let mut tensors: Vec<(String, Tensor)> = params.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { config_hash: cfg.hash_bytes(), tensors })
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.config_hash)
    }

    /// Rebuilds parameters for `cfg`, refusing a checkpoint made for another
    /// configuration.
    pub fn into_params(self, cfg: &ModelConfig) -> Result<ModelParams> {
        if self.config_hash != cfg.hash_bytes() {
            return Err(Error::HashMismatch { checkpoint: self.hash_hex(), config: cfg.hash() });
        }
        let mut params = ModelParams::init(cfg, 0)?;
        let mut slots = params.entries_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", slots.len(), self.tensors.len())));
        }
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        for ((name, slot), (found, t)) in slots.into_iter().zip(self.tensors) {
            if name != found || slot.shape != t.shape {
                return Err(Error::Shape(format!("tensor {found} {:?} does not match {name} {:?}", t.shape, slot.shape)));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&self.config_hash);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.shape.len() as u32);
            for &s in &t.shape {
                w.u64(s as u64);
            }
            for &v in &t.data {
                w.f32(v as f32);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(&CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Shape("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
            let n = n.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
            let Some(n) = n else {
                return Err(Error::Truncated(format!("checkpoint tensor {name} payload")));
            };
            let data: Vec<f64> = r.f32_vec(n)?.into_iter().map(f64::from).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            if let Some((prev, _)) = tensors.last() {
                if *prev >= name {
                    return Err(Error::Shape(format!("checkpoint records not sorted at {name}")));
                }
            }
            tensors.push((name, Tensor { shape, data }));
        }
        if r.remaining() != 0 {
            return Err(Error::Shape(format!("checkpoint has {} trailing bytes", r.remaining())));
        }
        Ok(Self { config_hash, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    write_file(path, &Checkpoint::from_params(params, cfg)?.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path)?)
}

/// Reads a checkpoint and checks it against `cfg`.
pub fn load_params(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    read_checkpoint(path)?.into_params(cfg)
}
