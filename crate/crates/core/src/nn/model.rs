//! Full forward/backward passes: patch embedding, encoder, and the two heads.

use super::attention::Pos;
use super::cnn::{cnn_backward, cnn_forward, CnnCache};
use super::config::{MaskStyle, ModelConfig, PeType};
use super::encoder::{block_backward, block_forward, encoder_backward, encoder_forward, Dropout};
use super::layers::{gelu, gelu_grad, linear_backward, linear_forward, rmsnorm_backward, rmsnorm_forward};
use super::params::ModelParams;
use super::tensor::Mat;
use crate::cyrope::CyRopeTable;
use crate::error::{Error, Result};
use crate::signal::SignalSegment;

/// Patch tokens of one segment in order `c * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// `[N × d]`
    pub embeddings: Mat,
    /// `(channel, time patch)` per token.
    pub coords: Vec<(usize, usize)>,
    pub masked: Vec<bool>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Raw patches of a segment, ready for the embedder.
#[derive(Debug, Clone)]
pub struct PatchInput {
    /// `[N × P]`, rows in token order.
    pub patches: Mat,
    pub coords: Vec<(usize, usize)>,
}

impl PatchInput {
    pub fn from_segment(seg: &SignalSegment, cfg: &ModelConfig) -> Result<Self> {
        if seg.channels != cfg.channels {
            return Err(Error::DimensionMismatch { expected: cfg.channels, found: seg.channels });
        }
        let p = cfg.patch_len;
        let t_n = seg.time_patches(p)?;
        let n = seg.channels * t_n;
        let mut patches = Mat::zeros(n, p);
        let mut coords = Vec::with_capacity(n);
        for c in 0..seg.channels {
            for t in 0..t_n {
                let row = patches.row_mut(c * t_n + t);
                for (dst, &v) in row.iter_mut().zip(seg.patch(c, t, p)) {
                    *dst = v as f64;
                }
                coords.push((c, t));
            }
        }
        Ok(Self { patches, coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Softmax cross-entropy `-log softmax(logits)[label]` and its logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - mx).exp()).sum();
    let lse = mx + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| (z - lse).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[label], grad)
}

/// Affine map `d → K`.
pub fn ssl_head(h: &[f64], params: &ModelParams) -> Vec<f64> {
    let x = Mat::from_vec(1, h.len(), h.to_vec());
    linear_forward(&x, &params.ssl_w, Some(&params.ssl_b)).data
}

/// `d → d → DoF` MLP with a GELU in between.
pub fn kin_head(h: &[f64], params: &ModelParams) -> Vec<f64> {
    let x = Mat::from_vec(1, h.len(), h.to_vec());
    let mut z = linear_forward(&x, &params.kin_w1, Some(&params.kin_b1));
    z.data.iter_mut().for_each(|v| *v = gelu(*v));
    linear_forward(&z, &params.kin_w2, Some(&params.kin_b2)).data
}

/// A configuration together with its rotation table.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    rope: Option<CyRopeTable>,
}

struct Embedded {
    x: Mat,
    cnn: CnnCache,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rope = match cfg.pe_type {
            PeType::Cyrope => Some(
                CyRopeTable::new(cfg.head_dim(), cfg.channels, cfg.temporal_base)?
                    .with_time_positions(cfg.max_time_patches),
            ),
            PeType::Absolute => None,
        };
        Ok(Self { cfg, rope })
    }

    pub fn rope(&self) -> Option<&CyRopeTable> {
        self.rope.as_ref()
    }

    fn check_input(&self, input: &PatchInput) -> Result<()> {
        if input.patches.cols != self.cfg.patch_len {
            return Err(Error::DimensionMismatch { expected: self.cfg.patch_len, found: input.patches.cols });
        }
        if self.cfg.pe_type == PeType::Absolute {
            if let Some(&(_, t)) = input.coords.iter().max_by_key(|(_, t)| *t) {
                if t >= self.cfg.max_time_patches {
                    return Err(Error::config(format!(
                        "{} time patches exceed the absolute position table ({})",
                        t + 1,
                        self.cfg.max_time_patches
                    )));
                }
            }
        }
        Ok(())
    }

    fn positions(&self, coords: &[(usize, usize)]) -> Vec<Pos> {
        coords.iter().map(|&(c, t)| self.rope.as_ref().map(|_| (t as i64, c as i64))).collect()
    }

    fn pe_row(&self, c: usize, t: usize) -> usize {
        c * self.cfg.max_time_patches + t
    }

    fn add_pe(&self, params: &ModelParams, x: &mut Mat, coords: &[(usize, usize)], offset: usize) {
        if let Some(pe) = &params.pos_embed {
            let d = self.cfg.d;
            for (i, &(c, t)) in coords.iter().enumerate() {
                let r = self.pe_row(c, t);
                for (v, p) in x.row_mut(offset + i).iter_mut().zip(&pe.data[r * d..(r + 1) * d]) {
                    *v += p;
                }
            }
        }
    }

    fn pe_backward(&self, grads: &mut ModelParams, dx: &Mat, coords: &[(usize, usize)], offset: usize) {
        if let Some(pe) = &mut grads.pos_embed {
            let d = self.cfg.d;
            for (i, &(c, t)) in coords.iter().enumerate() {
                let r = self.pe_row(c, t);
                for (g, v) in pe.data[r * d..(r + 1) * d].iter_mut().zip(dx.row(offset + i)) {
                    *g += v;
                }
            }
        }
    }

    fn embed(&self, params: &ModelParams, input: &PatchInput) -> Result<Embedded> {
        self.check_input(input)?;
        let (x, cnn) = cnn_forward(&input.patches, &params.cnn, &self.cfg);
        Ok(Embedded { x, cnn })
    }

    /// Patch embeddings of a segment, nothing masked.
    pub fn cnn_embed(&self, seg: &SignalSegment, params: &ModelParams) -> Result<TokenGrid> {
        let input = PatchInput::from_segment(seg, &self.cfg)?;
        let e = self.embed(params, &input)?;
        let n = input.len();
        Ok(TokenGrid { embeddings: e.x, coords: input.coords, masked: vec![false; n] })
    }

    /// Encoder output for a token grid; masked tokens are replaced by the mask
    /// token before position handling.
    pub fn encode(&self, params: &ModelParams, grid: &TokenGrid) -> Mat {
        let mut x = grid.embeddings.clone();
        for (i, &m) in grid.masked.iter().enumerate() {
            if m {
                x.row_mut(i).copy_from_slice(&params.mask_token.data);
            }
        }
        self.add_pe(params, &mut x, &grid.coords, 0);
        let pos = self.positions(&grid.coords);
        encoder_forward(&params.blocks, &params.final_norm, x, self.cfg.heads, &pos, self.rope(), None).0
    }

    /// Masked-prediction loss for one segment: mean cross-entropy over the
    /// masked tokens. When `grads` is given, `scale ·` the gradient is added.
    pub fn ssl_loss(
        &self,
        params: &ModelParams,
        input: &PatchInput,
        labels: &[usize],
        masked: &[usize],
        grads: Option<(&mut ModelParams, f64)>,
        dropout: Option<&mut Dropout>,
    ) -> Result<f64> {
        let n = input.len();
        if masked.is_empty() {
            return Err(Error::EmptyMask);
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
        }
        if let Some(&i) = masked.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("mask index {i} out of range for {n} tokens")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.cfg.codebook_size) {
            return Err(Error::Shape(format!("label {l} out of range for K={}", self.cfg.codebook_size)));
        }
        let emb = self.embed(params, input)?;
        match self.cfg.mask_style {
            MaskStyle::Replace => self.ssl_replace(params, input, emb, labels, masked, grads, dropout),
            MaskStyle::Mae => self.ssl_mae(params, input, emb, labels, masked, grads, dropout),
        }
    }

    fn ssl_logits_loss(
        &self,
        params: &ModelParams,
        h: &Mat,
        rows: &[usize],
        labels: &[usize],
        masked: &[usize],
    ) -> (Mat, Mat, f64, Mat) {
        let hm = h.select_rows(rows);
        let logits = linear_forward(&hm, &params.ssl_w, Some(&params.ssl_b));
        let m = masked.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Mat::zeros(logits.rows, logits.cols);
        for (r, &i) in masked.iter().enumerate() {
            let (l, g) = cross_entropy(logits.row(r), labels[i]);
            loss += l;
            dlogits.row_mut(r).copy_from_slice(&g);
        }
        dlogits.data.iter_mut().for_each(|v| *v /= m);
        (hm, logits, loss / m, dlogits)
    }

    #[allow(clippy::too_many_arguments)]
    fn ssl_replace(
        &self,
        params: &ModelParams,
        input: &PatchInput,
        emb: Embedded,
        labels: &[usize],
        masked: &[usize],
        grads: Option<(&mut ModelParams, f64)>,
        dropout: Option<&mut Dropout>,
    ) -> Result<f64> {
        let n = input.len();
        let mut is_masked = vec![false; n];
        let mut x = emb.x;
        for &i in masked {
            is_masked[i] = true;
            x.row_mut(i).copy_from_slice(&params.mask_token.data);
        }
        self.add_pe(params, &mut x, &input.coords, 0);
        let pos = self.positions(&input.coords);
        let heads = self.cfg.heads;
        let (h, enc) = encoder_forward(&params.blocks, &params.final_norm, x, heads, &pos, self.rope(), dropout);
        let (hm, _, loss, mut dlogits) = self.ssl_logits_loss(params, &h, masked, labels, masked);
        let Some((g, scale)) = grads else { return Ok(loss) };
        dlogits.data.iter_mut().for_each(|v| *v *= scale);
        let dhm = linear_backward(&dlogits, &hm, &params.ssl_w, &mut g.ssl_w, Some(&mut g.ssl_b), true).unwrap();
        let mut dh = Mat::zeros(n, self.cfg.d);
        for (r, &i) in masked.iter().enumerate() {
            dh.row_mut(i).copy_from_slice(dhm.row(r));
        }
        let dx = encoder_backward(
            &params.blocks,
            &params.final_norm,
            &dh,
            &enc,
            heads,
            &pos,
            self.rope(),
            &mut g.blocks,
            &mut g.final_norm,
        );
        self.pe_backward(g, &dx, &input.coords, 0);
        let mut de = dx;
        for &i in masked {
            for (t, v) in g.mask_token.data.iter_mut().zip(de.row(i)) {
                *t += v;
            }
            de.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        cnn_backward(&de, &emb.cnn, &params.cnn, &mut g.cnn);
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    fn ssl_mae(
        &self,
        params: &ModelParams,
        input: &PatchInput,
        emb: Embedded,
        labels: &[usize],
        masked: &[usize],
        grads: Option<(&mut ModelParams, f64)>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<f64> {
        let (Some(dec), Some(dec_norm)) = (&params.decoder, &params.decoder_norm) else {
            return Err(Error::Shape("decoder parameters missing for the visible-only mask style".into()));
        };
        let n = input.len();
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let mut is_masked = vec![false; n];
        masked.iter().for_each(|&i| is_masked[i] = true);
        let visible: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
        let vis_coords: Vec<(usize, usize)> = visible.iter().map(|&i| input.coords[i]).collect();
        let mask_coords: Vec<(usize, usize)> = masked.iter().map(|&i| input.coords[i]).collect();

        let mut xv = emb.x.select_rows(&visible);
        self.add_pe(params, &mut xv, &vis_coords, 0);
        let vis_pos = self.positions(&vis_coords);
        let (hv, enc) = encoder_forward(
            &params.blocks,
            &params.final_norm,
            xv,
            heads,
            &vis_pos,
            self.rope(),
            dropout.as_deref_mut(),
        );

        let nv = visible.len();
        let mut z = Mat::zeros(n, d);
        z.data[..nv * d].copy_from_slice(&hv.data);
        for r in 0..masked.len() {
            z.row_mut(nv + r).copy_from_slice(&params.mask_token.data);
        }
        self.add_pe(params, &mut z, &mask_coords, nv);
        let all_coords: Vec<(usize, usize)> = vis_coords.iter().chain(&mask_coords).copied().collect();
        let pos = self.positions(&all_coords);
        let (y, dcache) = block_forward(dec, z, heads, &pos, self.rope(), dropout);
        let (h, inv) = rmsnorm_forward(&y, dec_norm);
        let rows: Vec<usize> = (nv..n).collect();
        let (hm, _, loss, mut dlogits) = self.ssl_logits_loss(params, &h, &rows, labels, masked);
        let Some((g, scale)) = grads else { return Ok(loss) };

        dlogits.data.iter_mut().for_each(|v| *v *= scale);
        let dhm = linear_backward(&dlogits, &hm, &params.ssl_w, &mut g.ssl_w, Some(&mut g.ssl_b), true).unwrap();
        let mut dh = Mat::zeros(n, d);
        dh.data[nv * d..].copy_from_slice(&dhm.data);
        let dy = rmsnorm_backward(&dh, &y, dec_norm, &inv, g.decoder_norm.as_mut().unwrap());
        let dz = block_backward(dec, dy, &dcache, heads, &pos, self.rope(), g.decoder.as_mut().unwrap());
        self.pe_backward(g, &dz, &mask_coords, nv);
        for r in 0..masked.len() {
            for (t, v) in g.mask_token.data.iter_mut().zip(dz.row(nv + r)) {
                *t += v;
            }
        }
        let dhv = Mat::from_vec(nv, d, dz.data[..nv * d].to_vec());
        let dxv = encoder_backward(
            &params.blocks,
            &params.final_norm,
            &dhv,
            &enc,
            heads,
            &vis_pos,
            self.rope(),
            &mut g.blocks,
            &mut g.final_norm,
        );
        self.pe_backward(g, &dxv, &vis_coords, 0);
        let mut de = Mat::zeros(n, d);
        for (r, &i) in visible.iter().enumerate() {
            de.row_mut(i).copy_from_slice(dxv.row(r));
        }
        cnn_backward(&de, &emb.cnn, &params.cnn, &mut g.cnn);
        Ok(loss)
    }

    /// Kinematics prediction: the kinematics token is prepended without a
    /// position and the head reads its encoder output.
    pub fn predict(&self, params: &ModelParams, input: &PatchInput) -> Result<Vec<f64>> {
        Ok(self.regress(params, input, None, None, None)?.0)
    }

    /// Squared error summed over DoF for one segment; with `grads`, adds
    /// `scale ·` its gradient.
    pub fn finetune_loss(
        &self,
        params: &ModelParams,
        input: &PatchInput,
        target: &[f64],
        grads: Option<(&mut ModelParams, f64)>,
        dropout: Option<&mut Dropout>,
    ) -> Result<f64> {
        if target.len() != self.cfg.dof {
            return Err(Error::DimensionMismatch { expected: self.cfg.dof, found: target.len() });
        }
        Ok(self.regress(params, input, Some(target), grads, dropout)?.1)
    }

    fn regress(
        &self,
        params: &ModelParams,
        input: &PatchInput,
        target: Option<&[f64]>,
        grads: Option<(&mut ModelParams, f64)>,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Vec<f64>, f64)> {
        let emb = self.embed(params, input)?;
        let n = input.len();
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let mut x = Mat::zeros(n + 1, d);
        x.row_mut(0).copy_from_slice(&params.kin_token.data);
        x.data[d..].copy_from_slice(&emb.x.data);
        self.add_pe(params, &mut x, &input.coords, 1);
        let mut pos = vec![None];
        pos.extend(self.positions(&input.coords));
        let (h, enc) = encoder_forward(&params.blocks, &params.final_norm, x, heads, &pos, self.rope(), dropout);
        let h0 = Mat::from_vec(1, d, h.row(0).to_vec());
        let z1 = linear_forward(&h0, &params.kin_w1, Some(&params.kin_b1));
        let a1 = Mat::from_vec(1, d, z1.data.iter().map(|&v| gelu(v)).collect());
        let y = linear_forward(&a1, &params.kin_w2, Some(&params.kin_b2)).data;
        let Some(target) = target else { return Ok((y, 0.0)) };
        let loss: f64 = y.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
        let Some((g, scale)) = grads else { return Ok((y, loss)) };

        let dy = Mat::from_vec(1, y.len(), y.iter().zip(target).map(|(p, t)| 2.0 * (p - t) * scale).collect());
        let da1 = linear_backward(&dy, &a1, &params.kin_w2, &mut g.kin_w2, Some(&mut g.kin_b2), true).unwrap();
        let dz1 = Mat::from_vec(1, d, da1.data.iter().zip(&z1.data).map(|(g, &z)| g * gelu_grad(z)).collect());
        let dh0 = linear_backward(&dz1, &h0, &params.kin_w1, &mut g.kin_w1, Some(&mut g.kin_b1), true).unwrap();
        let mut dh = Mat::zeros(n + 1, d);
        dh.row_mut(0).copy_from_slice(&dh0.data);
        let dx = encoder_backward(
            &params.blocks,
            &params.final_norm,
            &dh,
            &enc,
            heads,
            &pos,
            self.rope(),
            &mut g.blocks,
            &mut g.final_norm,
        );
        self.pe_backward(g, &dx, &input.coords, 1);
        for (t, v) in g.kin_token.data.iter_mut().zip(dx.row(0)) {
            *t += v;
        }
        let de = Mat::from_vec(n, d, dx.data[d..].to_vec());
        cnn_backward(&de, &emb.cnn, &params.cnn, &mut g.cnn);
        Ok((y, loss))
    }
}

/// Convenience: mean-squared error over a batch and DoF, as the fine-tuning
/// objective defines it.
pub fn batch_mse(predictions: &[Vec<f64>], targets: &[&[f64]]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        for (a, b) in p.iter().zip(t.iter()) {
            s += (a - b) * (a - b);
            n += 1;
        }
    }
    s / n as f64
}
