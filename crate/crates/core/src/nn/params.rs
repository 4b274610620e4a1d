//! Trainable tensors, addressable by stable names.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MaskStyle, ModelConfig, PeType, CNN_CHANNELS, CNN_KERNELS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const PROJ_STD: f64 = 0.02;

/// Conv weights are stored `[out, kernel, in]` so a channels-last im2col row
/// multiplies them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `[3d, d]`: query, key and value rows stacked.
    pub qkv: Tensor,
    pub out: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub norm1: Tensor,
    pub norm2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cnn: [ConvParams; 3],
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
    pub mask_token: Tensor,
    pub kin_token: Tensor,
    pub ssl_w: Tensor,
    pub ssl_b: Tensor,
    pub kin_w1: Tensor,
    pub kin_b1: Tensor,
    pub kin_w2: Tensor,
    pub kin_b2: Tensor,
    pub pos_embed: Option<Tensor>,
    pub decoder: Option<BlockParams>,
    pub decoder_norm: Option<Tensor>,
}

fn conv_shapes(cfg: &ModelConfig) -> [(usize, usize, usize); 3] {
    let chans = [1, CNN_CHANNELS[0], CNN_CHANNELS[1], cfg.d];
    [0, 1, 2].map(|l| (chans[l + 1], CNN_KERNELS[l], chans[l]))
}

impl BlockParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d, cfg.ffn_dim());
        Self {
            qkv: Tensor::trunc_normal(&[3 * d, d], PROJ_STD, rng),
            out: Tensor::trunc_normal(&[d, d], PROJ_STD, rng),
            w1: Tensor::trunc_normal(&[f, d], PROJ_STD, rng),
            w2: Tensor::trunc_normal(&[d, f], PROJ_STD, rng),
            w3: Tensor::trunc_normal(&[f, d], PROJ_STD, rng),
            norm1: Tensor::full(&[d], 1.0),
            norm2: Tensor::full(&[d], 1.0),
        }
    }

    fn push<'a>(&'a self, prefix: &str, v: &mut Vec<(String, &'a Tensor)>) {
        v.push((format!("{prefix}.attn.qkv"), &self.qkv));
        v.push((format!("{prefix}.attn.out"), &self.out));
        v.push((format!("{prefix}.ffn.w1"), &self.w1));
        v.push((format!("{prefix}.ffn.w2"), &self.w2));
        v.push((format!("{prefix}.ffn.w3"), &self.w3));
        v.push((format!("{prefix}.norm1.gain"), &self.norm1));
        v.push((format!("{prefix}.norm2.gain"), &self.norm2));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, v: &mut Vec<(String, &'a mut Tensor)>) {
        v.push((format!("{prefix}.attn.qkv"), &mut self.qkv));
        v.push((format!("{prefix}.attn.out"), &mut self.out));
        v.push((format!("{prefix}.ffn.w1"), &mut self.w1));
        v.push((format!("{prefix}.ffn.w2"), &mut self.w2));
        v.push((format!("{prefix}.ffn.w3"), &mut self.w3));
        v.push((format!("{prefix}.norm1.gain"), &mut self.norm1));
        v.push((format!("{prefix}.norm2.gain"), &mut self.norm2));
    }
}

impl ModelParams {
    /// Deterministic initialisation from `seed`.
    ///
    /// Projections, tokens and position rows: truncated normal, std 0.02.
    /// Convolutions: truncated normal with He scaling `sqrt(2 / fan_in)`.
    /// Norm gains one, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let cnn = conv_shapes(cfg).map(|(o, k, i)| ConvParams {
            weight: Tensor::trunc_normal(&[o, k, i], (2.0 / (k * i) as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[o]),
        });
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(cfg, &mut rng)).collect();
        let mask_token = Tensor::trunc_normal(&[d], PROJ_STD, &mut rng);
        let kin_token = Tensor::trunc_normal(&[d], PROJ_STD, &mut rng);
        let ssl_w = Tensor::trunc_normal(&[cfg.codebook_size, d], PROJ_STD, &mut rng);
        let kin_w1 = Tensor::trunc_normal(&[d, d], PROJ_STD, &mut rng);
        let kin_w2 = Tensor::trunc_normal(&[cfg.dof, d], PROJ_STD, &mut rng);
        let pos_embed = (cfg.pe_type == PeType::Absolute)
            .then(|| Tensor::trunc_normal(&[cfg.channels * cfg.max_time_patches, d], PROJ_STD, &mut rng));
        let decoder = (cfg.mask_style == MaskStyle::Mae).then(|| BlockParams::init(cfg, &mut rng));
        let decoder_norm = (cfg.mask_style == MaskStyle::Mae).then(|| Tensor::full(&[d], 1.0));
        Ok(Self {
            cnn,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            mask_token,
            kin_token,
            ssl_w,
            ssl_b: Tensor::zeros(&[cfg.codebook_size]),
            kin_w1,
            kin_b1: Tensor::zeros(&[d]),
            kin_w2,
            kin_b2: Tensor::zeros(&[cfg.dof]),
            pos_embed,
            decoder,
            decoder_norm,
        })
    }

    /// All tensors with their names, in a fixed order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (l, c) in self.cnn.iter().enumerate() {
            v.push((format!("cnn.layer{}.weight", l + 1), &c.weight));
            v.push((format!("cnn.layer{}.bias", l + 1), &c.bias));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.push(&format!("blocks.{i}"), &mut v);
        }
        v.push(("final_norm.gain".into(), &self.final_norm));
        v.push(("mask_token".into(), &self.mask_token));
        v.push(("kin_token".into(), &self.kin_token));
        v.push(("ssl_head.weight".into(), &self.ssl_w));
        v.push(("ssl_head.bias".into(), &self.ssl_b));
        v.push(("kin_head.fc1.weight".into(), &self.kin_w1));
        v.push(("kin_head.fc1.bias".into(), &self.kin_b1));
        v.push(("kin_head.fc2.weight".into(), &self.kin_w2));
        v.push(("kin_head.fc2.bias".into(), &self.kin_b2));
        if let Some(p) = &self.pos_embed {
            v.push(("pos_embed".into(), p));
        }
        if let Some(b) = &self.decoder {
            b.push("decoder", &mut v);
        }
        if let Some(n) = &self.decoder_norm {
            v.push(("decoder_norm.gain".into(), n));
        }
        v
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (l, c) in self.cnn.iter_mut().enumerate() {
            v.push((format!("cnn.layer{}.weight", l + 1), &mut c.weight));
            v.push((format!("cnn.layer{}.bias", l + 1), &mut c.bias));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_mut(&format!("blocks.{i}"), &mut v);
        }
        v.push(("final_norm.gain".into(), &mut self.final_norm));
        v.push(("mask_token".into(), &mut self.mask_token));
        v.push(("kin_token".into(), &mut self.kin_token));
        v.push(("ssl_head.weight".into(), &mut self.ssl_w));
        v.push(("ssl_head.bias".into(), &mut self.ssl_b));
        v.push(("kin_head.fc1.weight".into(), &mut self.kin_w1));
        v.push(("kin_head.fc1.bias".into(), &mut self.kin_b1));
        v.push(("kin_head.fc2.weight".into(), &mut self.kin_w2));
        v.push(("kin_head.fc2.bias".into(), &mut self.kin_b2));
        if let Some(p) = &mut self.pos_embed {
            v.push(("pos_embed".into(), p));
        }
        if let Some(b) = &mut self.decoder {
            b.push_mut("decoder", &mut v);
        }
        if let Some(n) = &mut self.decoder_norm {
            v.push(("decoder_norm.gain".into(), n));
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.entries_mut() {
            t.zero_();
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.entries_mut().into_iter().zip(other.entries()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    /// Checks every tensor shape against what `cfg` prescribes.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = ModelParams::init(cfg, 0)?;
        let a = self.entries();
        let b = want.entries();
        if a.len() != b.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", b.len(), a.len())));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape != tb.shape {
                return Err(Error::Shape(format!("tensor {na} {:?} does not match {nb} {:?}", ta.shape, tb.shape)));
            }
        }
        Ok(())
    }
}

/// Norm gains and biases are exempt from weight decay.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".gain") || name.ends_with(".bias"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_parameter_count_is_pinned() {
        let p = ModelParams::init(&ModelConfig::desk(), 0).unwrap();
        // cnn: 32*7*1+32 + 96*5*32+96 + 64*3*96+64 = 34208
        // block: 3*64*64 + 64*64 + 3*168*64 + 2*64 = 48768, four of them
        // final norm 64, tokens 128, ssl 32*64+32, kin 64*64+64 + 5*64+5
        assert_eq!(p.param_count(), 236_037);
        assert_eq!(34_208 + 4 * 48_768 + 64 + 128 + 2_080 + 4_160 + 325, 236_037);
    }

    #[test]
    fn names_are_unique_and_shapes_derivable() {
        let cfg = ModelConfig { pe_type: PeType::Absolute, mask_style: MaskStyle::Mae, ..ModelConfig::desk() };
        let p = ModelParams::init(&cfg, 3).unwrap();
        let mut names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        p.check_shapes(&cfg).unwrap();
        assert!(p.check_shapes(&ModelConfig::desk()).is_err());
        assert!(p.is_finite());
        assert_eq!(p, ModelParams::init(&cfg, 3).unwrap());
    }

    #[test]
    fn decay_exemptions() {
        assert!(!is_decayed("blocks.0.norm1.gain"));
        assert!(!is_decayed("ssl_head.bias"));
        assert!(is_decayed("blocks.0.attn.qkv"));
        assert!(is_decayed("mask_token"));
    }
}
