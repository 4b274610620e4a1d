//! Signal segments, preprocessing and synthetic data.
//!
//! Preprocessing is applied per channel in a fixed order: band-pass, notch
//! comb, then robust scaling with clipping. See [`preprocess`].

mod filter;
mod io;
mod synth;

pub use filter::{butter_bandpass, filtfilt, iir_notch, Biquad};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{angular_distance, synthesize_dataset, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for the inter-quantile range of a channel.
pub const EPS_SCALE: f64 = 1e-8;

/// One recording window: `channels × len` samples, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    pub channels: usize,
    pub len: usize,
    pub sample_rate: f32,
    pub data: Vec<f32>,
    /// Window-level kinematic targets, one value per degree of freedom.
    pub targets: Option<Vec<f32>>,
}

impl SignalSegment {
    pub fn new(
        channels: usize,
        len: usize,
        sample_rate: f32,
        data: Vec<f32>,
        targets: Option<Vec<f32>>,
    ) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::Shape(format!("empty segment {channels}x{len}")));
        }
        if data.len() != channels * len {
            return Err(Error::DimensionMismatch { expected: channels * len, found: data.len() });
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::config(format!("sample rate must be positive, got {sample_rate}")));
        }
        Ok(Self { channels, len, sample_rate, data, targets })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn dof(&self) -> usize {
        self.targets.as_ref().map_or(0, Vec::len)
    }

    pub fn time_patches(&self, patch_len: usize) -> Result<usize> {
        if patch_len == 0 || self.len % patch_len != 0 {
            return Err(Error::PatchMisalignment { len: self.len, patch: patch_len });
        }
        Ok(self.len / patch_len)
    }

    /// Patch `t` of channel `c`.
    pub fn patch(&self, c: usize, t: usize, patch_len: usize) -> &[f32] {
        &self.channel(c)[t * patch_len..(t + 1) * patch_len]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segment data".into()));
        }
        Ok(())
    }

    fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> SignalSegment {
        let mut out = self.clone();
        for c in 0..self.channels {
            let x: Vec<f64> = self.channel(c).iter().map(|&v| v as f64).collect();
            let y = f(&x);
            for (dst, v) in out.channel_mut(c).iter_mut().zip(y) {
                *dst = v as f32;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub notch_base_hz: f64,
    pub notch_harmonics: usize,
    pub clip_bound: f64,
    pub scale_quantiles: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_lo_hz: 8.0,
            band_hi_hz: 500.0,
            notch_base_hz: 50.0,
            notch_harmonics: 10,
            clip_bound: 20.0,
            scale_quantiles: (0.25, 0.75),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        if !(self.band_lo_hz > 0.0 && self.band_lo_hz < self.band_hi_hz) {
            return Err(Error::config(format!(
                "band edges must satisfy 0 < lo < hi, got {} / {}",
                self.band_lo_hz, self.band_hi_hz
            )));
        }
        if self.band_hi_hz >= nyquist {
            return Err(Error::config(format!(
                "band edge {} Hz is at or above Nyquist {} Hz",
                self.band_hi_hz, nyquist
            )));
        }
        if !(self.notch_base_hz > 0.0) {
            return Err(Error::config("notch base frequency must be positive"));
        }
        if self.notch_harmonics > 0 {
            let top = self.notch_base_hz * self.notch_harmonics as f64;
            if top >= nyquist {
                return Err(Error::config(format!(
                    "notch harmonic {top} Hz is at or above Nyquist {nyquist} Hz"
                )));
            }
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::config("clip bound must be positive"));
        }
        let (lo, hi) = self.scale_quantiles;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config(format!("quantile pair must be increasing in (0,1), got ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn notch_frequencies(&self) -> Vec<f64> {
        (1..=self.notch_harmonics).map(|h| self.notch_base_hz * h as f64).collect()
    }
}

/// Band-pass order of the Butterworth prototype.
pub const BANDPASS_ORDER: usize = 4;
/// Quality factor of each notch.
pub const NOTCH_Q: f64 = 30.0;

/// Zero-phase band-pass of every channel.
pub fn bandpass(seg: &SignalSegment, cfg: &PreprocessConfig) -> Result<SignalSegment> {
    seg.ensure_finite()?;
    let fs = seg.sample_rate as f64;
    cfg.validate(fs)?;
    let warmup = 8 * BANDPASS_ORDER;
    if seg.len < warmup {
        return Err(Error::config(format!(
            "segment length {} shorter than filter warm-up {warmup}",
            seg.len
        )));
    }
    let sos = butter_bandpass(BANDPASS_ORDER, cfg.band_lo_hz, cfg.band_hi_hz, fs)?;
    let pad = pad_len(seg.len, fs / cfg.band_lo_hz);
    Ok(seg.map_channels(|x| filtfilt(&sos, x, pad)))
}

/// Zero-phase notch comb at the base frequency and its harmonics.
pub fn notch(seg: &SignalSegment, cfg: &PreprocessConfig) -> Result<SignalSegment> {
    seg.ensure_finite()?;
    let fs = seg.sample_rate as f64;
    cfg.validate(fs)?;
    let sections: Vec<Biquad> = cfg
        .notch_frequencies()
        .into_iter()
        .map(|f0| iir_notch(f0, NOTCH_Q, fs))
        .collect::<Result<_>>()?;
    let pad = pad_len(seg.len, fs / cfg.notch_base_hz * 2.0);
    Ok(seg.map_channels(|x| filtfilt(&sections, x, pad)))
}

fn pad_len(len: usize, want: f64) -> usize {
    (want.ceil() as usize).min(len - 1)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `clamp((x - median) / (q_hi - q_lo), -clip, clip)` per channel.
pub fn robust_scale_clip(seg: &SignalSegment, cfg: &PreprocessConfig) -> Result<SignalSegment> {
    seg.ensure_finite()?;
    let (qlo, qhi) = cfg.scale_quantiles;
    let clip = cfg.clip_bound;
    Ok(seg.map_channels(|x| {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = quantile_sorted(&sorted, 0.5);
        let mut iqr = quantile_sorted(&sorted, qhi) - quantile_sorted(&sorted, qlo);
        if iqr <= EPS_SCALE {
            iqr = EPS_SCALE;
        }
        x.iter().map(|v| ((v - median) / iqr).clamp(-clip, clip)).collect()
    }))
}

/// Band-pass, notch, robust scale, in that order.
pub fn preprocess(seg: &SignalSegment, cfg: &PreprocessConfig) -> Result<SignalSegment> {
    let s = bandpass(seg, cfg)?;
    let s = notch(&s, cfg)?;
    robust_scale_clip(&s, cfg)
}
