//! Patch spectrograms, K-means codebooks and pseudo-labels.

mod codebook;
mod kmeans;

pub use codebook::{decode_codebook, encode_codebook, read_codebook, write_codebook, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use kmeans::{assign_nearest, kmeans_fit, lloyd, squared_distance, KMeansFit, MAX_ITERS, RESTARTS};

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SignalSegment;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Use `ln(1 + |X|)` instead of `|X|`.
    pub log_magnitude: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: 64, hop: 32, log_magnitude: true }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Frames that fit entirely inside a patch of `patch_len` samples.
    pub fn frames(&self, patch_len: usize) -> usize {
        if patch_len < self.window_len || self.hop == 0 {
            0
        } else {
            (patch_len - self.window_len) / self.hop + 1
        }
    }

    pub fn validate(&self, patch_len: usize) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::config(format!(
                "STFT needs 0 < hop <= window_len and window_len >= 2, got hop={} window={}",
                self.hop, self.window_len
            )));
        }
        if patch_len < self.window_len {
            return Err(Error::config(format!(
                "patch length {patch_len} shorter than STFT window {}",
                self.window_len
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self, patch_len: usize) -> usize {
        self.bins() * self.frames(patch_len)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Magnitude spectrogram of one patch, `bins × frames`, frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    /// Frequency-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn unflatten(v: Vec<f64>, bins: usize, frames: usize) -> Result<Self> {
        if v.len() != bins * frames {
            return Err(Error::DimensionMismatch { expected: bins * frames, found: v.len() });
        }
        Ok(Self { bins, frames, data: v })
    }
}

/// Reusable FFT plan for a fixed window.
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(cfg: &StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_len);
        Self { cfg: cfg.clone(), window: hann(cfg.window_len), fft }
    }

    pub fn patch(&self, patch: &[f64]) -> Result<Spectrogram> {
        self.cfg.validate(patch.len())?;
        let bins = self.cfg.bins();
        let frames = self.cfg.frames(patch.len());
        let mut data = vec![0.0; bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.window_len];
        for tau in 0..frames {
            let start = tau * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(patch[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for f in 0..bins {
                let m = buf[f].norm();
                data[f * frames + tau] = if self.cfg.log_magnitude { m.ln_1p() } else { m };
            }
        }
        Ok(Spectrogram { bins, frames, data })
    }
}

pub fn patch_stft(patch: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    StftPlan::new(cfg).patch(patch)
}

/// What the codebook clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Flattened patch spectrograms.
    Stft,
    /// Flattened raw patch samples.
    Raw,
}

impl FeatureKind {
    pub fn dim(self, stft: &StftConfig, patch_len: usize) -> usize {
        match self {
            FeatureKind::Stft => stft.feature_dim(patch_len),
            FeatureKind::Raw => patch_len,
        }
    }
}

/// Feature vectors of every patch of a segment, token order `c * T + t`.
pub fn segment_features(
    seg: &SignalSegment,
    patch_len: usize,
    kind: FeatureKind,
    stft: &StftConfig,
) -> Result<Vec<f64>> {
    let t_n = seg.time_patches(patch_len)?;
    let dim = kind.dim(stft, patch_len);
    let plan = match kind {
        FeatureKind::Stft => {
            stft.validate(patch_len)?;
            Some(StftPlan::new(stft))
        }
        FeatureKind::Raw => None,
    };
    let mut out = Vec::with_capacity(seg.channels * t_n * dim);
    let mut patch = vec![0.0; patch_len];
    for c in 0..seg.channels {
        for t in 0..t_n {
            for (dst, &v) in patch.iter_mut().zip(seg.patch(c, t, patch_len)) {
                *dst = v as f64;
            }
            match &plan {
                Some(p) => out.extend(p.patch(&patch)?.data),
                None => out.extend_from_slice(&patch),
            }
        }
    }
    Ok(out)
}

/// `K × D` centroids plus the featurisation that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCodebook {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub stft: StftConfig,
    pub feature: FeatureKind,
    pub patch_len: usize,
    pub fit_seed: u64,
    pub inertia: f64,
}

impl SpectralCodebook {
    /// Fits a codebook on `vectors` (`M × dim`, row-major). Centroids are
    /// rounded to f32 so the in-memory codebook equals its file form.
    pub fn fit(
        vectors: &[f64],
        k: usize,
        seed: u64,
        stft: &StftConfig,
        feature: FeatureKind,
        patch_len: usize,
    ) -> Result<Self> {
        let dim = feature.dim(stft, patch_len);
        if dim == 0 {
            return Err(Error::config("feature dimension is zero"));
        }
        let fit = kmeans_fit(vectors, dim, k, seed, MAX_ITERS)?;
        let centroids = fit.centroids.iter().map(|&v| v as f32 as f64).collect();
        Ok(Self {
            k,
            dim,
            centroids,
            stft: stft.clone(),
            feature,
            patch_len,
            fit_seed: seed,
            inertia: fit.inertia,
        })
    }

    /// Fits on every patch of every segment.
    pub fn fit_segments(
        segments: &[SignalSegment],
        k: usize,
        seed: u64,
        stft: &StftConfig,
        feature: FeatureKind,
        patch_len: usize,
    ) -> Result<Self> {
        let mut all = Vec::new();
        for s in segments {
            all.extend(segment_features(s, patch_len, feature, stft)?);
        }
        Self::fit(&all, k, seed, stft, feature, patch_len)
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("codebook needs K >= 2, got {}", self.k)));
        }
        if self.centroids.len() != self.k * self.dim {
            return Err(Error::Shape("centroid payload does not match K x D".into()));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook centroids".into()));
        }
        let want = self.feature.dim(&self.stft, self.patch_len);
        if want != self.dim {
            return Err(Error::Shape(format!(
                "codebook dimension {} does not match featurisation ({want})",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn assign(&self, vectors: &[f64]) -> Result<Vec<usize>> {
        assign_pseudolabels(self, vectors)
    }

    /// Pseudo-label of every token of `seg`.
    pub fn label_segment(&self, seg: &SignalSegment) -> Result<Vec<usize>> {
        let feats = segment_features(seg, self.patch_len, self.feature, &self.stft)?;
        self.assign(&feats)
    }
}

/// Nearest centroid by squared Euclidean distance, ties to the lowest index.
pub fn assign_pseudolabels(codebook: &SpectralCodebook, vectors: &[f64]) -> Result<Vec<usize>> {
    if vectors.len() % codebook.dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim,
            found: vectors.len() % codebook.dim,
        });
    }
    Ok(vectors
        .chunks_exact(codebook.dim)
        .map(|v| assign_nearest(&codebook.centroids, codebook.dim, v).0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;

    /// Direct O(N²) DFT magnitudes of a windowed frame.
    fn dft_mag(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| Complex64::from_polar(x, -2.0 * PI * (k * i) as f64 / n as f64))
                    .sum::<Complex64>()
                    .norm()
            })
            .collect()
    }

    fn raw_cfg() -> StftConfig {
        StftConfig { log_magnitude: false, ..Default::default() }
    }

    #[test]
    fn frame_count_and_dims() {
        let c = StftConfig::default();
        assert_eq!(c.frames(100), 2);
        assert_eq!(c.bins(), 33);
        assert_eq!(c.feature_dim(100), 66);
        assert!(matches!(patch_stft(&[0.0; 50], &c), Err(Error::Config(_))));
    }

    #[test]
    fn zero_patch_is_zero() {
        let s = patch_stft(&[0.0; 100], &StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_peaks_at_bin_four() {
        let x: Vec<f64> = (0..100).map(|n| (2.0 * PI * 125.0 * n as f64 / 2000.0).sin()).collect();
        let s = patch_stft(&x, &raw_cfg()).unwrap();
        let w = hann(64);
        for tau in 0..s.frames {
            let frame: Vec<f64> = (0..64).map(|i| x[tau * 32 + i] * w[i]).collect();
            let oracle = dft_mag(&frame);
            for f in 0..s.bins {
                assert!((s.get(f, tau) - oracle[f]).abs() < 1e-9 * oracle[4]);
            }
            let argmax = (0..s.bins).max_by(|&a, &b| s.get(a, tau).total_cmp(&s.get(b, tau))).unwrap();
            assert_eq!(argmax, 4);
        }
    }

    #[test]
    fn constant_patch_spectrum() {
        let s = patch_stft(&[1.0; 100], &raw_cfg()).unwrap();
        let wsum: f64 = hann(64).iter().sum();
        assert!((s.get(0, 0) - wsum).abs() < 1e-9 * wsum);
        // The periodic Hann window's own spectrum: bin 1 holds half of bin 0,
        // everything above it vanishes.
        let frame = hann(64);
        let oracle = dft_mag(&frame);
        assert!((oracle[1] - wsum / 2.0).abs() < 1e-9 * wsum);
        assert!((s.get(1, 0) - oracle[1]).abs() < 1e-9 * wsum);
        for f in 2..s.bins {
            assert!(s.get(f, 0) < 1e-9 * wsum, "bin {f}: {}", s.get(f, 0));
        }
    }

    #[test]
    fn log_feature_is_log1p_of_magnitude() {
        let x: Vec<f64> = (0..100).map(|n| ((n * 7) % 13) as f64 - 6.0).collect();
        let raw = patch_stft(&x, &raw_cfg()).unwrap();
        let lg = patch_stft(&x, &StftConfig::default()).unwrap();
        for (a, b) in raw.data.iter().zip(&lg.data) {
            assert!((a.ln_1p() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let x: Vec<f64> = (0..100).map(|n| ((n as f64) * 0.37).sin() * 3.0 + ((n * n) % 5) as f64).collect();
        let s = patch_stft(&x, &raw_cfg()).unwrap();
        let w = hann(64);
        for tau in 0..s.frames {
            let energy: f64 = (0..64).map(|i| (x[tau * 32 + i] * w[i]).powi(2)).sum();
            // one-sided spectrum: interior bins count twice
            let spec: f64 = (0..s.bins)
                .map(|f| {
                    let m2 = s.get(f, tau).powi(2);
                    if f == 0 || f == s.bins - 1 { m2 } else { 2.0 * m2 }
                })
                .sum::<f64>()
                / 64.0;
            assert!((spec - energy).abs() <= 1e-9 * energy);
        }
    }

    #[test]
    fn flatten_is_frequency_major() {
        let s = Spectrogram::unflatten(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(s.get(0, 1), 2.0);
        assert_eq!(s.get(1, 0), 3.0);
        assert_eq!(s.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(Spectrogram::unflatten(vec![0.0; 5], 2, 2).is_err());
    }

    fn book(centroids: Vec<f64>, k: usize, dim: usize) -> SpectralCodebook {
        SpectralCodebook {
            k,
            dim,
            centroids,
            stft: StftConfig::default(),
            feature: FeatureKind::Raw,
            patch_len: dim,
            fit_seed: 0,
            inertia: 0.0,
        }
    }

    #[test]
    fn pseudolabels_exact_and_ties() {
        let cents: Vec<f64> = (0..10).flat_map(|k| [k as f64, 0.0]).collect();
        let b = book(cents.clone(), 10, 2);
        assert_eq!(b.assign(&[7.0, 0.0]).unwrap(), vec![7]);
        assert_eq!(b.assign(&cents).unwrap(), (0..10).collect::<Vec<_>>());
        // equidistant to centroid 2 and centroid 5
        let mut c2 = vec![100.0; 20];
        c2[4..6].copy_from_slice(&[1.0, 0.0]);
        c2[10..12].copy_from_slice(&[-1.0, 0.0]);
        let b2 = book(c2, 10, 2);
        assert_eq!(b2.assign(&[0.0, 0.0]).unwrap(), vec![2]);
        assert!(matches!(b.assign(&[1.0, 2.0, 3.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pseudolabels_match_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (k, d, m) = (9, 5, 200);
        let cents: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vecs: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = book(cents.clone(), k, d).assign(&vecs).unwrap();
        for (i, v) in vecs.chunks(d).enumerate() {
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let dist: f64 = (0..d).map(|e| (v[e] - cents[j * d + e]).powi(2)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            assert_eq!(got[i], best.0);
        }
    }

    #[test]
    fn segment_features_token_order() {
        let data: Vec<f32> = (0..2 * 200).map(|i| i as f32).collect();
        let seg = SignalSegment::new(2, 200, 2000.0, data, None).unwrap();
        let raw = segment_features(&seg, 100, FeatureKind::Raw, &StftConfig::default()).unwrap();
        // token 2 is channel 1, time patch 0
        assert_eq!(raw[2 * 100], 200.0);
        let st = segment_features(&seg, 100, FeatureKind::Stft, &StftConfig::default()).unwrap();
        assert_eq!(st.len(), 4 * 66);
    }
}
