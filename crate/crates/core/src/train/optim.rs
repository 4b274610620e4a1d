//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{is_decayed, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-4,
            warmup_steps: 0,
            total_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config(format!("lr_peak {} must be finite and non-negative", self.lr_peak)));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "need 0 <= warmup ({}) <= total ({}) and total > 0",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then half a cosine down to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &AdamWConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return if step <= cfg.total_steps { cfg.lr_peak } else { 0.0 };
    }
    let frac = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    (cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &ModelParams, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, cfg })
    }
}

/// One update at `lr_at(state.step)`; returns the learning rate used.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimState) -> f64 {
    let c = &state.cfg;
    let lr = lr_at(state.step, c);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2, eps, wd) = (c.beta1, c.beta2, c.eps, c.weight_decay);
    let entries = params.entries_mut().into_iter().zip(grads.entries());
    for (((name, p), (_, g)), ((_, m), (_, v))) in entries.zip(state.m.entries_mut().into_iter().zip(state.v.entries_mut()))
    {
        let decay = if is_decayed(&name) { wd } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let update = (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + eps);
            p.data[i] -= lr * (update + decay * p.data[i]);
        }
    }
    state.step += 1;
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn sched(warmup: u64, total: u64) -> AdamWConfig {
        AdamWConfig { lr_peak: 1e-3, warmup_steps: warmup, total_steps: total, ..Default::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = sched(10, 100);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert!(lr_at(100, &c).abs() < 1e-18);
        assert!((lr_at(5, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_at(55, &c) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at(0, &sched(0, 10)), 1e-3);
        assert_eq!(lr_at(500, &c), 0.0);
    }

    fn tiny() -> (ModelParams, AdamWConfig) {
        let cfg = ModelConfig { d: 8, layers: 1, heads: 2, codebook_size: 2, ..ModelConfig::desk() };
        (ModelParams::init(&cfg, 1).unwrap(), AdamWConfig { lr_peak: 0.1, total_steps: 10, ..Default::default() })
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let (mut p, mut c) = tiny();
        c.weight_decay = 0.0;
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimState::new(&p, c).unwrap();
        adamw_step(&mut p, &g, &mut s);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradients_with_decay_shrink_decayed_tensors_only() {
        let (mut p, c) = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimState::new(&p, c.clone()).unwrap();
        let lr = adamw_step(&mut p, &g, &mut s);
        assert_eq!(lr, 0.1);
        for ((name, a), (_, b)) in p.entries().into_iter().zip(before.entries()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let want = if is_decayed(&name) { y * (1.0 - lr * c.weight_decay) } else { *y };
                assert!((x - want).abs() <= 1e-15 * y.abs().max(1e-300), "{name}");
            }
        }
    }

    #[test]
    fn unit_gradient_step_matches_hand_formula() {
        let (mut p, mut c) = tiny();
        c.weight_decay = 0.0;
        let mut g = p.zeros_like();
        g.kin_b2.data[0] = 1.0;
        let mut s = OptimState::new(&p, c).unwrap();
        adamw_step(&mut p, &g, &mut s);
        // m̂ = 1, v̂ = 1 → Δ = -lr · 1 / (1 + 1e-8)
        assert!((p.kin_b2.data[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let (mut p, mut c) = tiny();
        c.weight_decay = 0.0;
        c.lr_peak = 1e-3;
        let f = |p: &ModelParams| p.ssl_w.data.iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>();
        let before = f(&p);
        let mut g = p.zeros_like();
        for (gv, v) in g.ssl_w.data.iter_mut().zip(&p.ssl_w.data) {
            *gv = 2.0 * (v - 0.3);
        }
        let mut s = OptimState::new(&p, c).unwrap();
        adamw_step(&mut p, &g, &mut s);
        assert!(f(&p) < before);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(AdamWConfig { total_steps: 0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { warmup_steps: 5, total_steps: 4, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
