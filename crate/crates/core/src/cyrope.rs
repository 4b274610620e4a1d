//! Cylindrical rotary position embedding.
//!
//! A head vector of width `d_h` is split in two halves. The first half is
//! rotated pairwise by `t · θ_t[i]` (time-patch index `t`), the second by
//! `c · θ_c[i]` (channel index `c`), with pairs `(2j, 2j+1)` inside each half.
//!
//! Temporal frequencies follow the usual RoPE ladder `β_t^(-2i/(d_h/2))`.
//! Spatial frequencies use the base `β_c = C / 2π`, so that the last pair
//! (`i = d_h/4`) turns by exactly `2π / C` per channel and completes one
//! revolution around the electrode ring.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DEFAULT_TEMPORAL_BASE: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct CyRopeTable {
    head_dim: usize,
    channels: usize,
    temporal_base: f64,
    temporal_freqs: Vec<f64>,
    spatial_freqs: Vec<f64>,
    // [position × pair] caches, extended on demand by `with_time_positions`
    t_cos: Vec<f64>,
    t_sin: Vec<f64>,
    c_cos: Vec<f64>,
    c_sin: Vec<f64>,
    time_positions: usize,
}

impl CyRopeTable {
    pub fn new(head_dim: usize, channels: usize, temporal_base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::config(format!("head dim {head_dim} must be a positive multiple of 4")));
        }
        if channels < 2 {
            return Err(Error::config(format!("need at least 2 channels on the ring, got {channels}")));
        }
        if !(temporal_base > 1.0) {
            return Err(Error::config(format!("temporal base must exceed 1, got {temporal_base}")));
        }
        let pairs = head_dim / 4;
        let half = (head_dim / 2) as f64;
        let ring_step = 2.0 * PI / channels as f64;
        let temporal_freqs = (1..=pairs).map(|i| temporal_base.powf(-2.0 * i as f64 / half)).collect();
        // (2π/C)^(2i/(d_h/2)); the exponent is exactly 1 at the last pair
        let spatial_freqs = (1..=pairs).map(|i| ring_step.powf(2.0 * i as f64 / half)).collect();
        let mut table = Self {
            head_dim,
            channels,
            temporal_base,
            temporal_freqs,
            spatial_freqs,
            t_cos: Vec::new(),
            t_sin: Vec::new(),
            c_cos: Vec::new(),
            c_sin: Vec::new(),
            time_positions: 0,
        };
        let (cc, cs) = table.cache(&table.spatial_freqs, channels);
        table.c_cos = cc;
        table.c_sin = cs;
        Ok(table)
    }

    /// Precomputes temporal rotations for indices `0..positions`.
    pub fn with_time_positions(mut self, positions: usize) -> Self {
        let (tc, ts) = self.cache(&self.temporal_freqs, positions);
        self.t_cos = tc;
        self.t_sin = ts;
        self.time_positions = positions;
        self
    }

    fn cache(&self, freqs: &[f64], positions: usize) -> (Vec<f64>, Vec<f64>) {
        let mut cos = Vec::with_capacity(positions * freqs.len());
        let mut sin = Vec::with_capacity(positions * freqs.len());
        for p in 0..positions {
            for &f in freqs {
                let (s, c) = (p as f64 * f).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        (cos, sin)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn pairs(&self) -> usize {
        self.head_dim / 4
    }
    pub fn temporal_base(&self) -> f64 {
        self.temporal_base
    }
    pub fn spatial_base(&self) -> f64 {
        self.channels as f64 / (2.0 * PI)
    }
    /// `θ_t` for pairs `i = 1..=d_h/4`, stored at `i - 1`.
    pub fn temporal_freqs(&self) -> &[f64] {
        &self.temporal_freqs
    }
    /// `θ_c` for pairs `i = 1..=d_h/4`; the last entry is `2π / C`.
    pub fn spatial_freqs(&self) -> &[f64] {
        &self.spatial_freqs
    }

    fn angles(&self, t: i64, c: i64, pair: usize, spatial: bool) -> (f64, f64) {
        if spatial {
            if c >= 0 && (c as usize) < self.channels {
                let i = c as usize * self.pairs() + pair;
                return (self.c_cos[i], self.c_sin[i]);
            }
            (c as f64 * self.spatial_freqs[pair]).sin_cos().swap()
        } else {
            if t >= 0 && (t as usize) < self.time_positions {
                let i = t as usize * self.pairs() + pair;
                return (self.t_cos[i], self.t_sin[i]);
            }
            (t as f64 * self.temporal_freqs[pair]).sin_cos().swap()
        }
    }

    fn rotate(&self, v: &mut [f64], t: i64, c: i64, sign: f64) {
        debug_assert_eq!(v.len(), self.head_dim);
        let pairs = self.pairs();
        for half in 0..2 {
            let spatial = half == 1;
            let base = half * self.head_dim / 2;
            for j in 0..pairs {
                let (cos, sin) = self.angles(t, c, j, spatial);
                let sin = sin * sign;
                let (a, b) = (v[base + 2 * j], v[base + 2 * j + 1]);
                v[base + 2 * j] = a * cos - b * sin;
                v[base + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }

    /// Rotates `v` in place for time-patch `t` and channel `c`.
    pub fn apply_in_place(&self, v: &mut [f64], t: i64, c: i64) {
        self.rotate(v, t, c, 1.0);
    }

    /// Inverse rotation (the transpose), used to pull gradients back.
    pub fn apply_inverse_in_place(&self, v: &mut [f64], t: i64, c: i64) {
        self.rotate(v, t, c, -1.0);
    }

    pub fn apply(&self, v: &[f64], t: i64, c: i64) -> Vec<f64> {
        let mut out = v.to_vec();
        self.apply_in_place(&mut out, t, c);
        out
    }

    /// `pair, θ_t, θ_c` rows, pairs numbered from 1.
    pub fn frequency_csv(&self) -> String {
        let mut s = String::from("pair,theta_t,theta_c\n");
        for i in 0..self.pairs() {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", i + 1, self.temporal_freqs[i], self.spatial_freqs[i]));
        }
        s
    }
}

trait Swap {
    fn swap(self) -> Self;
}

impl Swap for (f64, f64) {
    fn swap(self) -> Self {
        (self.1, self.0)
    }
}

/// Tokens without a physical position (the kinematics token) are not rotated.
pub fn special_token_rotation(v: &[f64]) -> Vec<f64> {
    v.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn frequencies_match_closed_forms() {
        let t = CyRopeTable::new(64, 12, 1e4).unwrap();
        assert!((t.spatial_base() - 1.909_859_317_102_744).abs() < 1e-12);
        assert!((t.spatial_freqs()[15] - 0.523_598_775_598_298_9).abs() < 1e-12);
        assert!((t.temporal_freqs()[15] - 1e-4).abs() < 1e-16);
        assert!((t.temporal_freqs()[0] - 0.562_341_325_190_349).abs() < 1e-12);
        for w in t.temporal_freqs().windows(2) {
            assert!(w[1] < w[0]);
        }
        for (i, &f) in t.spatial_freqs().iter().enumerate() {
            let e = 2.0 * (i + 1) as f64 / 32.0;
            let want = (2.0 * PI / 12.0).powf(e);
            assert!((f - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(CyRopeTable::new(18, 12, 1e4).is_err());
        assert!(CyRopeTable::new(16, 1, 1e4).is_err());
    }

    #[test]
    fn quarter_turn_and_identity() {
        // d_h = 4, C = 4: spatial pair turns by π/2 per channel
        let t = CyRopeTable::new(4, 4, 1e4).unwrap();
        let out = t.apply(&[0.0, 0.0, 1.0, 0.0], 0, 1);
        assert!(out[2].abs() < 1e-15 && (out[3] - 1.0).abs() < 1e-15);
        let v = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(t.apply(&v, 0, 0), v.to_vec());
        assert_eq!(special_token_rotation(&v), v.to_vec());
    }

    #[test]
    fn inverse_undoes_rotation() {
        let t = CyRopeTable::new(16, 12, 1e4).unwrap().with_time_positions(20);
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut w = t.apply(&v, 7, 5);
        t.apply_inverse_in_place(&mut w, 7, 5);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cached_and_uncached_agree() {
        let cached = CyRopeTable::new(16, 12, 1e4).unwrap().with_time_positions(30);
        let bare = CyRopeTable::new(16, 12, 1e4).unwrap();
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        assert_eq!(cached.apply(&v, 13, 4), bare.apply(&v, 13, 4));
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(v in proptest::collection::vec(-5.0f64..5.0, 16), t in -50i64..50, c in -30i64..30) {
            let table = CyRopeTable::new(16, 8, 1e4).unwrap();
            let r = table.apply(&v, t, c);
            prop_assert!((dot(&r, &r).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn halves_factorise(q in proptest::collection::vec(-1.0f64..1.0, 16), k in proptest::collection::vec(-1.0f64..1.0, 16),
                            t1 in 0i64..40, t2 in 0i64..40, c1 in 0i64..12, c2 in 0i64..12, c3 in 0i64..12, c4 in 0i64..12) {
            let table = CyRopeTable::new(16, 12, 1e4).unwrap();
            let tq = dot(&table.apply(&q, t1, c1)[..8], &table.apply(&k, t2, c2)[..8]);
            let tq2 = dot(&table.apply(&q, t1, c3)[..8], &table.apply(&k, t2, c4)[..8]);
            prop_assert!((tq - tq2).abs() < 1e-12);
            let sq = dot(&table.apply(&q, t1, c1)[8..], &table.apply(&k, t2, c2)[8..]);
            let sq2 = dot(&table.apply(&q, t1 + 5, c1)[8..], &table.apply(&k, t2 + 9, c2)[8..]);
            prop_assert!((sq - sq2).abs() < 1e-12);
        }
    }
}
