//! Pre-norm transformer blocks and the encoder stack.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{mha_backward, mha_forward, AttnCache, Pos};
use super::layers::{rmsnorm_backward, rmsnorm_forward, swiglu_backward, swiglu_forward, SwiGluCache};
use super::params::BlockParams;
use super::tensor::{Mat, Tensor};
use crate::cyrope::CyRopeTable;

/// Inverted dropout on the residual branches during training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..len).map(|_| if self.rng.gen::<f64>() < self.p { 0.0 } else { keep }).collect()
    }
}

fn apply_mask(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        m.data.iter_mut().zip(mask).for_each(|(v, k)| *v *= k);
    }
}

pub struct BlockCache {
    x: Mat,
    h1: Mat,
    inv1: Vec<f64>,
    pub attn: AttnCache,
    drop1: Option<Vec<f64>>,
    x2: Mat,
    h2: Mat,
    inv2: Vec<f64>,
    ffn: SwiGluCache,
    drop2: Option<Vec<f64>>,
}

/// `x ← x + MHA(norm1(x)); x ← x + FFN(norm2(x))`
pub fn block_forward(
    p: &BlockParams,
    x: Mat,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
    mut dropout: Option<&mut Dropout>,
) -> (Mat, BlockCache) {
    let (h1, inv1) = rmsnorm_forward(&x, &p.norm1);
    let (mut a, attn) = mha_forward(&h1, &p.qkv, &p.out, heads, pos, rope);
    let drop1 = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| d.mask(a.data.len()));
    apply_mask(&mut a, &drop1);
    let mut x2 = x.clone();
    x2.add_assign(&a);
    let (h2, inv2) = rmsnorm_forward(&x2, &p.norm2);
    let (mut f, ffn) = swiglu_forward(&h2, &p.w1, &p.w2, &p.w3);
    let drop2 = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| d.mask(f.data.len()));
    apply_mask(&mut f, &drop2);
    let mut y = x2.clone();
    y.add_assign(&f);
    (y, BlockCache { x, h1, inv1, attn, drop1, x2, h2, inv2, ffn, drop2 })
}

pub fn block_backward(
    p: &BlockParams,
    dy: Mat,
    cache: &BlockCache,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
    g: &mut BlockParams,
) -> Mat {
    let mut df = dy.clone();
    apply_mask(&mut df, &cache.drop2);
    let dh2 = swiglu_backward(&df, &cache.h2, &cache.ffn, &p.w1, &p.w2, &p.w3, &mut g.w1, &mut g.w2, &mut g.w3);
    let mut dx2 = dy;
    dx2.add_assign(&rmsnorm_backward(&dh2, &cache.x2, &p.norm2, &cache.inv2, &mut g.norm2));
    let mut da = dx2.clone();
    apply_mask(&mut da, &cache.drop1);
    let dh1 = mha_backward(&da, &cache.h1, &cache.attn, &p.qkv, &p.out, heads, pos, rope, &mut g.qkv, &mut g.out);
    let mut dx = dx2;
    dx.add_assign(&rmsnorm_backward(&dh1, &cache.x, &p.norm1, &cache.inv1, &mut g.norm1));
    dx
}

pub struct EncoderCache {
    pub blocks: Vec<BlockCache>,
    pre_norm: Mat,
    inv: Vec<f64>,
}

/// Block stack followed by a final RMSNorm.
pub fn encoder_forward(
    blocks: &[BlockParams],
    final_norm: &Tensor,
    x: Mat,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
    mut dropout: Option<&mut Dropout>,
) -> (Mat, EncoderCache) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        let (next, c) = block_forward(b, h, heads, pos, rope, dropout.as_deref_mut());
        caches.push(c);
        h = next;
    }
    let (y, inv) = rmsnorm_forward(&h, final_norm);
    (y, EncoderCache { blocks: caches, pre_norm: h, inv })
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_backward(
    blocks: &[BlockParams],
    final_norm: &Tensor,
    dy: &Mat,
    cache: &EncoderCache,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
    g_blocks: &mut [BlockParams],
    g_final: &mut Tensor,
) -> Mat {
    let mut dh = rmsnorm_backward(dy, &cache.pre_norm, final_norm, &cache.inv, g_final);
    for i in (0..blocks.len()).rev() {
        dh = block_backward(&blocks[i], dh, &cache.blocks[i], heads, pos, rope, &mut g_blocks[i]);
    }
    dh
}
