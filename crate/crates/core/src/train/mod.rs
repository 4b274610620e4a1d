//! Masking, objectives, optimisation and the training loops.

mod ablation;
mod loops;
pub mod metrics;
pub mod optim;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MaskStyle, PeType};

pub use ablation::{run_ablation, AblationCell, AblationSettings, AblationTable, OrderingCheck};
pub use loops::{evaluate, finetune_loop, predict_all, pretrain_loop, pseudo_labels};
pub use metrics::{regression_metrics, Metrics};
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimState};

/// Masked token indices for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, unique.
    pub masked: Vec<usize>,
    pub seed: u64,
    pub n: usize,
}

/// Number of masked tokens: `ratio · n` rounded half to even.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round_ties_even() as usize
}

/// Uniform sample of `round(ratio · n)` distinct indices.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = mask_count(n, ratio).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, n, k).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan { masked, seed, n })
}

/// SplitMix64 of `base ⊕ tag`, for deriving independent stream seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTarget {
    #[default]
    StftClusters,
    RawClusters,
    None,
}

impl PretrainTarget {
    pub fn feature(self) -> Option<crate::spectral::FeatureKind> {
        match self {
            PretrainTarget::StftClusters => Some(crate::spectral::FeatureKind::Stft),
            PretrainTarget::RawClusters => Some(crate::spectral::FeatureKind::Raw),
            PretrainTarget::None => None,
        }
    }
}

/// The three named seeds every random choice derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Shuffling and codebook fitting.
    pub data: u64,
    /// Parameter initialisation.
    pub model: u64,
    /// Masking and dropout.
    pub mask: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { data: seed, model: seed, mask: seed }
    }
}

/// Step budget and optimiser settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::pretrain_desk()
    }
}

impl PhaseConfig {
    pub fn pretrain_desk() -> Self {
        Self {
            steps: 200,
            warmup_steps: 10,
            batch_size: 8,
            lr_peak: 1e-2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn finetune_desk() -> Self {
        Self { steps: 500, warmup_steps: 25, batch_size: 4, lr_peak: 1e-3, beta2: 0.999, ..Self::pretrain_desk() }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.adamw().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TrainMode,
    pub pretrain_target: PretrainTarget,
    pub pe_type: PeType,
    pub mask_style: MaskStyle,
    pub seeds: Seeds,
    /// Model configuration hash, as stored in checkpoints.
    pub config_hash: String,
    pub segments: usize,
    pub loss_curve: Vec<LossPoint>,
    pub metrics: Option<Metrics>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|p| p.loss)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for p in &self.loss_curve {
            s.push_str(&format!("{},{:e},{:e}\n", p.step, p.lr, p.loss));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.json` and `loss.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("loss.csv"), self.loss_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        assert_eq!(sample_mask(40, 0.3, 1).unwrap().masked.len(), 12);
        assert!(sample_mask(40, 0.0, 1).unwrap().masked.is_empty());
        assert_eq!(mask_count(5, 0.3), 2);
        assert_eq!(mask_count(5, 0.5), 2);
        assert_eq!(mask_count(7, 0.5), 4);
        assert!(sample_mask(10, 1.5, 0).is_err());
    }

    #[test]
    fn masks_are_deterministic_unique_and_in_range() {
        let a = sample_mask(240, 0.3, 9).unwrap();
        assert_eq!(a, sample_mask(240, 0.3, 9).unwrap());
        assert_ne!(a.masked, sample_mask(240, 0.3, 10).unwrap().masked);
        assert_eq!(a.masked.len(), 72);
        assert!(a.masked.windows(2).all(|w| w[0] < w[1]));
        assert!(a.masked.iter().all(|&i| i < 240));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
        assert_eq!(derive_seed(3, 4), derive_seed(3, 4));
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let r = RunReport {
            mode: TrainMode::Pretrain,
            pretrain_target: PretrainTarget::StftClusters,
            pe_type: PeType::Cyrope,
            mask_style: MaskStyle::Replace,
            seeds: Seeds::all(0),
            config_hash: "x".into(),
            segments: 1,
            loss_curve: vec![LossPoint { step: 0, lr: 0.0, loss: 3.5 }, LossPoint { step: 1, lr: 1e-4, loss: 3.0 }],
            metrics: None,
            wall_time_s: 0.0,
        };
        let csv = r.loss_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("step,lr,loss\n0,"));
        let back: RunReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
