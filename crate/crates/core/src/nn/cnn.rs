//! Channel-independent convolutional patch embedder.
//!
//! Every patch of every channel goes through the same stack:
//! conv(k7, s2, 32) → GELU → maxpool(3) → conv(k5, s1, 96) → GELU → maxpool(3)
//! → conv(k3, s1, d) → GELU → mean over positions. Convolutions pad with
//! `(k-1)/2` zeros on each side; pooling drops the remainder.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::config::{ModelConfig, CNN_KERNELS, CNN_STRIDES, POOL};
use super::layers::{gelu, gelu_grad};
use super::params::ConvParams;
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Mat};

/// Activations `[patches, positions, channels]`, channels last.
#[derive(Debug, Clone)]
struct Act {
    patches: usize,
    len: usize,
    ch: usize,
    data: Vec<f64>,
}

struct ConvCache {
    cols: Vec<f64>,
    pre: Vec<f64>,
    in_len: usize,
    out_len: usize,
    in_ch: usize,
}

pub struct CnnCache {
    convs: Vec<ConvCache>,
    pool_idx: [Vec<usize>; 2],
    pool_in_len: [usize; 2],
    final_len: usize,
    patches: usize,
}

impl CnnCache {
    /// Hash of the max-pool selections; equal signatures mean the same
    /// smooth piece of the embedding.
    pub fn pool_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pool_idx.hash(&mut h);
        h.finish()
    }
}

fn im2col(x: &Act, k: usize, s: usize, out_len: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let width = k * x.ch;
    let mut cols = vec![0.0; x.patches * out_len * width];
    for n in 0..x.patches {
        for o in 0..out_len {
            let row = &mut cols[(n * out_len + o) * width..(n * out_len + o + 1) * width];
            for j in 0..k {
                let p = (o * s + j) as isize - pad as isize;
                if p < 0 || p as usize >= x.len {
                    continue;
                }
                let src = &x.data[(n * x.len + p as usize) * x.ch..(n * x.len + p as usize + 1) * x.ch];
                row[j * x.ch..(j + 1) * x.ch].copy_from_slice(src);
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], patches: usize, in_len: usize, in_ch: usize, k: usize, s: usize, out_len: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let width = k * in_ch;
    let mut dx = vec![0.0; patches * in_len * in_ch];
    for n in 0..patches {
        for o in 0..out_len {
            let row = &dcols[(n * out_len + o) * width..(n * out_len + o + 1) * width];
            for j in 0..k {
                let p = (o * s + j) as isize - pad as isize;
                if p < 0 || p as usize >= in_len {
                    continue;
                }
                let dst = &mut dx[(n * in_len + p as usize) * in_ch..(n * in_len + p as usize + 1) * in_ch];
                for (a, b) in dst.iter_mut().zip(&row[j * in_ch..(j + 1) * in_ch]) {
                    *a += b;
                }
            }
        }
    }
    dx
}

fn conv_forward(x: &Act, p: &ConvParams, k: usize, s: usize) -> (Act, ConvCache) {
    let out_ch = p.weight.shape[0];
    let out_len = (x.len + 2 * ((k - 1) / 2) - k) / s + 1;
    let cols = im2col(x, k, s, out_len);
    let rows = x.patches * out_len;
    let mut pre = vec![0.0; rows * out_ch];
    matmul_nt(&cols, &p.weight.data, rows, k * x.ch, out_ch, &mut pre, false);
    for r in 0..rows {
        for (v, b) in pre[r * out_ch..(r + 1) * out_ch].iter_mut().zip(&p.bias.data) {
            *v += b;
        }
    }
    let data = pre.iter().map(|&v| gelu(v)).collect();
    let act = Act { patches: x.patches, len: out_len, ch: out_ch, data };
    (act, ConvCache { cols, pre, in_len: x.len, out_len, in_ch: x.ch })
}

/// `dy` is the gradient w.r.t. the GELU output.
fn conv_backward(dy: &[f64], c: &ConvCache, p: &ConvParams, g: &mut ConvParams, k: usize, s: usize, patches: usize, need_dx: bool) -> Option<Vec<f64>> {
    let out_ch = p.weight.shape[0];
    let rows = patches * c.out_len;
    let dz: Vec<f64> = dy.iter().zip(&c.pre).map(|(d, &z)| d * gelu_grad(z)).collect();
    matmul_tn(&dz, &c.cols, out_ch, rows, k * c.in_ch, &mut g.weight.data, true);
    for r in 0..rows {
        for (gb, d) in g.bias.data.iter_mut().zip(&dz[r * out_ch..(r + 1) * out_ch]) {
            *gb += d;
        }
    }
    need_dx.then(|| {
        let mut dcols = vec![0.0; rows * k * c.in_ch];
        matmul_nn(&dz, &p.weight.data, rows, out_ch, k * c.in_ch, &mut dcols, false);
        col2im(&dcols, patches, c.in_len, c.in_ch, k, s, c.out_len)
    })
}

fn maxpool(x: &Act) -> (Act, Vec<usize>) {
    let out_len = x.len / POOL;
    let mut data = vec![0.0; x.patches * out_len * x.ch];
    let mut idx = vec![0usize; data.len()];
    for n in 0..x.patches {
        for o in 0..out_len {
            for ch in 0..x.ch {
                let mut best = (f64::NEG_INFINITY, 0);
                for j in 0..POOL {
                    let src = (n * x.len + o * POOL + j) * x.ch + ch;
                    if x.data[src] > best.0 {
                        best = (x.data[src], src);
                    }
                }
                let dst = (n * out_len + o) * x.ch + ch;
                data[dst] = best.0;
                idx[dst] = best.1;
            }
        }
    }
    (Act { patches: x.patches, len: out_len, ch: x.ch, data }, idx)
}

/// Embeds `patches` (`[count × patch_len]`) into `[count × d]`.
pub fn cnn_forward(patches: &Mat, convs: &[ConvParams; 3], cfg: &ModelConfig) -> (Mat, CnnCache) {
    let x0 = Act { patches: patches.rows, len: patches.cols, ch: 1, data: patches.data.clone() };
    let (a1, c1) = conv_forward(&x0, &convs[0], CNN_KERNELS[0], CNN_STRIDES[0]);
    let (p1, i1) = maxpool(&a1);
    let (a2, c2) = conv_forward(&p1, &convs[1], CNN_KERNELS[1], CNN_STRIDES[1]);
    let (p2, i2) = maxpool(&a2);
    let (a3, c3) = conv_forward(&p2, &convs[2], CNN_KERNELS[2], CNN_STRIDES[2]);
    let d = cfg.d;
    let mut out = Mat::zeros(patches.rows, d);
    let inv = 1.0 / a3.len as f64;
    for n in 0..a3.patches {
        let row = out.row_mut(n);
        for o in 0..a3.len {
            for (r, v) in row.iter_mut().zip(&a3.data[(n * a3.len + o) * d..(n * a3.len + o + 1) * d]) {
                *r += v * inv;
            }
        }
    }
    let cache = CnnCache {
        pool_in_len: [a1.len, a2.len],
        final_len: a3.len,
        convs: vec![c1, c2, c3],
        pool_idx: [i1, i2],
        patches: patches.rows,
    };
    (out, cache)
}

/// Accumulates conv gradients; patch inputs are data, so no input gradient.
pub fn cnn_backward(dy: &Mat, cache: &CnnCache, convs: &[ConvParams; 3], g: &mut [ConvParams; 3]) {
    let n = cache.patches;
    let d = dy.cols;
    let l3 = cache.final_len;
    let inv = 1.0 / l3 as f64;
    let mut da3 = vec![0.0; n * l3 * d];
    for p in 0..n {
        for o in 0..l3 {
            for (dst, s) in da3[(p * l3 + o) * d..(p * l3 + o + 1) * d].iter_mut().zip(dy.row(p)) {
                *dst = s * inv;
            }
        }
    }
    let [g1, g2, g3] = g;
    let dp2 = conv_backward(&da3, &cache.convs[2], &convs[2], g3, CNN_KERNELS[2], CNN_STRIDES[2], n, true).unwrap();
    let mut da2 = vec![0.0; n * cache.pool_in_len[1] * cache.convs[1].pre.len() / (n * cache.pool_in_len[1])];
    for (i, &src) in cache.pool_idx[1].iter().enumerate() {
        da2[src] += dp2[i];
    }
    let dp1 = conv_backward(&da2, &cache.convs[1], &convs[1], g2, CNN_KERNELS[1], CNN_STRIDES[1], n, true).unwrap();
    let mut da1 = vec![0.0; cache.convs[0].pre.len()];
    for (i, &src) in cache.pool_idx[0].iter().enumerate() {
        da1[src] += dp1[i];
    }
    conv_backward(&da1, &cache.convs[0], &convs[0], g1, CNN_KERNELS[0], CNN_STRIDES[0], n, false);
}
