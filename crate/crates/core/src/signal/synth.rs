//! Synthetic multi-channel EMG with planted angular and spectral structure.
//!
//! Each degree of freedom drives a smooth kinematic trace `y_f(t)` in `[0, 1]`
//! and a band-limited noise carrier shared by all channels. Channel `c` sits at
//! angle `2πc/C` on the ring and picks up DoF `f` with gain
//! `exp(-κ · angdist(2πc/C, α_f)²)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{butter_bandpass, filtfilt, SignalSegment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub channels: usize,
    pub len: usize,
    pub dof: usize,
    pub segments: usize,
    pub seed: u64,
    /// Standard deviation of per-channel white noise.
    pub noise: f64,
    /// Angular concentration of the channel gains; `inf` keeps only the
    /// nearest channel.
    pub kappa: f64,
    pub sample_rate: f64,
    pub carrier_lo_hz: f64,
    pub carrier_hi_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 12,
            len: 2000,
            dof: 5,
            segments: 256,
            seed: 0,
            noise: 0.05,
            kappa: 4.0,
            sample_rate: 2000.0,
            carrier_lo_hz: 20.0,
            carrier_hi_hz: 450.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.len == 0 || self.dof == 0 {
            return Err(Error::config(format!(
                "synthetic shape must be positive: channels={} len={} dof={}",
                self.channels, self.len, self.dof
            )));
        }
        if self.len < 64 {
            return Err(Error::config(format!("synthetic length {} too short", self.len)));
        }
        if !(self.noise >= 0.0) || !(self.kappa >= 0.0) {
            return Err(Error::config("noise and kappa must be non-negative"));
        }
        if !(self.sample_rate > 0.0) || !(self.carrier_hi_hz < self.sample_rate / 2.0) {
            return Err(Error::config("carrier band must lie below Nyquist"));
        }
        Ok(())
    }

    /// Ring angle assigned to each degree of freedom.
    pub fn muscle_angles(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_a11e);
        (0..self.dof).map(|_| rng.gen_range(0.0..2.0 * PI)).collect()
    }

    /// Gain matrix `[channels × dof]`.
    pub fn gains(&self) -> Vec<f64> {
        let angles = self.muscle_angles();
        let c = self.channels;
        let mut g = vec![0.0; c * self.dof];
        for (f, &alpha) in angles.iter().enumerate() {
            let dist: Vec<f64> =
                (0..c).map(|ch| angular_distance(2.0 * PI * ch as f64 / c as f64, alpha)).collect();
            if self.kappa.is_infinite() {
                let nearest = dist
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                g[nearest * self.dof + f] = 1.0;
            } else {
                for (ch, d) in dist.iter().enumerate() {
                    g[ch * self.dof + f] = (-self.kappa * d * d).exp();
                }
            }
        }
        g
    }
}

/// Shortest distance between two angles on the circle.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn smooth_trace(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let parts = rng.gen_range(2..=4);
    let comps: Vec<(f64, f64, f64)> = (0..parts)
        .map(|_| (rng.gen_range(0.5..1.0), rng.gen_range(0.2..1.5), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let s: f64 = comps.iter().map(|&(a, f, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            0.5 + 0.5 * s / total
        })
        .collect()
}

fn carrier(rng: &mut ChaCha8Rng, cfg: &SynthConfig, sections: &[super::Biquad]) -> Vec<f64> {
    let white: Vec<f64> = (0..cfg.len).map(|_| rng.sample(StandardNormal)).collect();
    let mut band = filtfilt(sections, &white, cfg.len.min(200));
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    let var = band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / band.len() as f64;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in &mut band {
        *v = (*v - mean) * inv;
    }
    band
}

/// Deterministic synthetic dataset; targets are the kinematics at the last
/// sample of each window.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<SignalSegment>> {
    cfg.validate()?;
    let gains = cfg.gains();
    let sections = butter_bandpass(4, cfg.carrier_lo_hz, cfg.carrier_hi_hz, cfg.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c_n, l, dof) = (cfg.channels, cfg.len, cfg.dof);

    let mut out = Vec::with_capacity(cfg.segments);
    for _ in 0..cfg.segments {
        let traces: Vec<Vec<f64>> = (0..dof).map(|_| smooth_trace(&mut rng, l, cfg.sample_rate)).collect();
        let carriers: Vec<Vec<f64>> = (0..dof).map(|_| carrier(&mut rng, cfg, &sections)).collect();
        let mut data = vec![0f32; c_n * l];
        for c in 0..c_n {
            for n in 0..l {
                let mut v = 0.0;
                for f in 0..dof {
                    v += gains[c * dof + f] * traces[f][n] * carriers[f][n];
                }
                if cfg.noise > 0.0 {
                    let w: f64 = rng.sample(StandardNormal);
                    v += cfg.noise * w;
                }
                data[c * l + n] = v as f32;
            }
        }
        let targets = traces.iter().map(|t| t[l - 1] as f32).collect();
        out.push(SignalSegment::new(c_n, l, cfg.sample_rate as f32, data, Some(targets))?);
    }
    Ok(out)
}
