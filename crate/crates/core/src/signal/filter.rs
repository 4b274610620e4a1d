//! IIR filter design and zero-phase filtering in second-order sections.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Transposed direct-form II state for a unit step in steady state.
    fn step_state(&self) -> [f64; 2] {
        let h = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * h;
        let z1 = self.b[1] - self.a[1] * h + z2;
        [z1, z2]
    }

    /// Complex response at normalised angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (self.a[0] + z1 * self.a[1] + z2 * self.a[2])
    }
}

/// Digital Butterworth band-pass designed from an analog prototype of the given
/// order via low-pass to band-pass transform and a pre-warped bilinear map.
/// Returns `order` sections, unit gain at the band centre.
pub fn butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 {
        return Err(Error::config("filter order must be positive"));
    }
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0) {
        return Err(Error::config(format!(
            "band edges {lo_hz}..{hi_hz} Hz invalid for sample rate {fs} Hz"
        )));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * lo_hz / fs).tan();
    let wh = fs2 * (PI * hi_hz / fs).tan();
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    let mut sections = Vec::with_capacity(order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p_lp = Complex64::from_polar(1.0, theta);
        let half = p_lp * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        for p in [half + root, half - root] {
            // keep one pole of each conjugate pair
            if p.im > 0.0 {
                let pd = (fs2 + p) / (fs2 - p);
                sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * pd.re, pd.norm_sqr()] });
            }
        }
    }
    if sections.len() != order {
        return Err(Error::Numerical(format!(
            "band-pass design produced {} sections for order {order}",
            sections.len()
        )));
    }
    let wc = 2.0 * (w0 / fs2).atan();
    let gain = sections.iter().map(|s| s.response(wc)).product::<Complex64>().norm();
    let per = gain.powf(-1.0 / order as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per;
        }
    }
    Ok(sections)
}

/// Second-order IIR notch at `f0` with quality factor `q`.
pub fn iir_notch(f0: f64, q: f64, fs: f64) -> Result<Biquad> {
    if !(f0 > 0.0 && f0 < fs / 2.0) {
        return Err(Error::config(format!("notch frequency {f0} Hz outside (0, {})", fs / 2.0)));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let g = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Biquad { b: [g, -2.0 * g * c, g], a: [1.0, -2.0 * g * c, 2.0 * g - 1.0] })
}

fn sosfilt(sections: &[Biquad], x: &mut [f64]) {
    let x0 = x.first().copied().unwrap_or(0.0);
    let mut scale = x0;
    for s in sections {
        let zi = s.step_state();
        let mut z1 = zi[0] * scale;
        let mut z2 = zi[1] * scale;
        scale *= s.dc_gain();
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[1] * y + z2;
            z2 = s.b[2] * xin - s.a[2] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd extension of `pad` samples at each end
/// and steady-state initial conditions.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    sosfilt(sections, &mut ext);
    ext.reverse();
    sosfilt(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain_db(sections: &[Biquad], f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let h: Complex64 = sections.iter().map(|s| s.response(w)).product();
        20.0 * h.norm().log10()
    }

    #[test]
    fn butterworth_band_shape() {
        let sos = butter_bandpass(4, 8.0, 500.0, 2000.0).unwrap();
        assert_eq!(sos.len(), 4);
        // -3 dB at both edges, flat in the middle
        assert!((gain_db(&sos, 8.0, 2000.0) + 3.0103).abs() < 0.01);
        assert!((gain_db(&sos, 500.0, 2000.0) + 3.0103).abs() < 0.01);
        assert!(gain_db(&sos, 100.0, 2000.0).abs() < 0.01);
        assert!(gain_db(&sos, 1.0, 2000.0) < -60.0);
        assert!(gain_db(&sos, 950.0, 2000.0) < -40.0);
    }

    #[test]
    fn notch_response() {
        let s = iir_notch(50.0, 30.0, 2000.0).unwrap();
        assert!(gain_db(&[s], 50.0, 2000.0) < -100.0);
        assert!(gain_db(&[s], 60.0, 2000.0) > -0.1);
        assert!(iir_notch(1000.0, 30.0, 2000.0).is_err());
    }

    #[test]
    fn filtfilt_constant_through_unity_dc_filter() {
        let s = iir_notch(100.0, 30.0, 2000.0).unwrap();
        let y = filtfilt(&[s], &[2.0; 300], 50);
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }
}
