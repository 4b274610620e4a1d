use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Positional encoding used by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeType {
    /// Rotary time/ring rotation of queries and keys.
    Cyrope,
    /// Learned table added to the token embeddings.
    Absolute,
}

/// How masked tokens reach the encoder during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// Masked embeddings replaced by a learned token; the full grid is encoded.
    Replace,
    /// Only visible tokens are encoded; mask tokens join before one extra
    /// decoder block.
    Mae,
}

pub const CNN_CHANNELS: [usize; 2] = [32, 96];
pub const CNN_KERNELS: [usize; 3] = [7, 5, 3];
pub const CNN_STRIDES: [usize; 3] = [2, 1, 1];
pub const POOL: usize = 3;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub channels: usize,
    /// Number of pseudo-label classes `K`.
    pub codebook_size: usize,
    pub dof: usize,
    pub mask_ratio: f64,
    pub dropout: f64,
    pub pe_type: PeType,
    pub mask_style: MaskStyle,
    /// Rows of the absolute position table per channel.
    pub max_time_patches: usize,
    /// β_t of the temporal rotary frequencies. The desk value 10 at `d_h = 16`
    /// gives the same fastest rotation (≈0.56 rad per patch) as 1e4 at `d_h = 64`.
    pub temporal_base: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            d: 64,
            layers: 4,
            heads: 4,
            patch_len: 100,
            channels: 12,
            codebook_size: 32,
            dof: 5,
            mask_ratio: 0.3,
            dropout: 0.0,
            pe_type: PeType::Cyrope,
            mask_style: MaskStyle::Replace,
            max_time_patches: 20,
            temporal_base: 10.0,
        }
    }

    pub fn paper() -> Self {
        Self { preset: "paper".into(), d: 256, layers: 18, codebook_size: 500, temporal_base: 1e4, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `8d/3` rounded to the nearest multiple of 8.
    pub fn ffn_dim(&self) -> usize {
        ((self.d as f64 / 3.0).round() as usize) * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::config(format!("head dim {} must be a multiple of 4", self.head_dim())));
        }
        if self.patch_len < 18 {
            return Err(Error::config(format!("patch length {} too short for the CNN stem", self.patch_len)));
        }
        if self.channels < 2 {
            return Err(Error::config("need at least 2 channels"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook size K must be at least 2"));
        }
        if self.dof == 0 {
            return Err(Error::config("dof must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_time_patches == 0 {
            return Err(Error::config("max_time_patches must be positive"));
        }
        if !(self.temporal_base > 1.0) {
            return Err(Error::config("temporal base must exceed 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("model config serialises");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let canon = serde_json::to_vec(self).expect("model config serialises");
        Sha256::digest(&canon).into()
    }

    /// Positions after each CNN stage for one patch.
    pub fn cnn_trace(&self) -> [usize; 6] {
        let conv = |len: usize, k: usize, s: usize| (len + 2 * ((k - 1) / 2) - k) / s + 1;
        let a = conv(self.patch_len, CNN_KERNELS[0], CNN_STRIDES[0]);
        let b = a / POOL;
        let c = conv(b, CNN_KERNELS[1], CNN_STRIDES[1]);
        let d = c / POOL;
        let e = conv(d, CNN_KERNELS[2], CNN_STRIDES[2]);
        [self.patch_len, a, b, c, d, e]
    }
}
