//! Grid over position encoding × pre-training target with shared seeds.

use serde::{Deserialize, Serialize};

use super::loops::{evaluate, finetune_loop, pretrain_loop};
use super::{PhaseConfig, PretrainTarget, RunReport, Seeds};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, PeType};
use crate::signal::SignalSegment;
use crate::spectral::{SpectralCodebook, StftConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub stft: StftConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<(PeType, PretrainTarget)>,
}

impl AblationSettings {
    /// The full 2 × 3 grid.
    pub fn full_grid() -> Vec<(PeType, PretrainTarget)> {
        let mut v = Vec::new();
        for pe in [PeType::Cyrope, PeType::Absolute] {
            for t in [PretrainTarget::StftClusters, PretrainTarget::RawClusters, PretrainTarget::None] {
                v.push((pe, t));
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub pe_type: PeType,
    pub pretrain_target: PretrainTarget,
    pub seeds: Vec<u64>,
    pub test_r2: Vec<f64>,
    pub test_mse: Vec<f64>,
    pub test_mae: Vec<f64>,
    pub mean_r2: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_r2: f64,
    pub pretrain_reports: Vec<RunReport>,
    pub finetune_reports: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: String,
    pub worse: String,
    pub margin: f64,
    /// Larger of the two cells' across-seed standard deviations.
    pub required: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub comparisons: Vec<Comparison>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    /// `None` when the grid lacks the cells the ordering refers to.
    pub ordering: Option<OrderingCheck>,
}

fn label(pe: PeType, t: PretrainTarget) -> String {
    let pe = match pe {
        PeType::Cyrope => "cyrope",
        PeType::Absolute => "absolute",
    };
    let t = match t {
        PretrainTarget::StftClusters => "stft_clusters",
        PretrainTarget::RawClusters => "raw_clusters",
        PretrainTarget::None => "none",
    };
    format!("{pe}+{t}")
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn cell(&self, pe: PeType, t: PretrainTarget) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.pe_type == pe && c.pretrain_target == t)
    }

    fn ordering_check(&self) -> Option<OrderingCheck> {
        let best = self.cell(PeType::Cyrope, PretrainTarget::StftClusters)?;
        let rivals = [(PeType::Cyrope, PretrainTarget::None), (PeType::Absolute, PretrainTarget::StftClusters)];
        let comparisons: Vec<Comparison> = rivals
            .iter()
            .filter_map(|&(pe, t)| self.cell(pe, t))
            .map(|c| {
                let margin = best.mean_r2 - c.mean_r2;
                let required = best.std_r2.max(c.std_r2);
                Comparison {
                    better: label(best.pe_type, best.pretrain_target),
                    worse: label(c.pe_type, c.pretrain_target),
                    margin,
                    required,
                    holds: margin > required,
                }
            })
            .collect();
        if comparisons.len() < rivals.len() {
            return None;
        }
        let holds = comparisons.iter().all(|c| c.holds);
        Some(OrderingCheck { comparisons, holds })
    }
}

/// Runs every cell for every seed. All three named seeds equal the grid
/// seed, so cells differ only in their ablation flags.
pub fn run_ablation(
    settings: &AblationSettings,
    train: &[SignalSegment],
    test: &[SignalSegment],
) -> Result<AblationTable> {
    if settings.seeds.is_empty() || settings.cells.is_empty() {
        return Err(Error::config("ablation needs at least one seed and one cell"));
    }
    let mut cells: Vec<AblationCell> = settings
        .cells
        .iter()
        .map(|&(pe, t)| AblationCell {
            pe_type: pe,
            pretrain_target: t,
            seeds: Vec::new(),
            test_r2: Vec::new(),
            test_mse: Vec::new(),
            test_mae: Vec::new(),
            mean_r2: 0.0,
            std_r2: 0.0,
            pretrain_reports: Vec::new(),
            finetune_reports: Vec::new(),
        })
        .collect();
    for &seed in &settings.seeds {
        let seeds = Seeds::all(seed);
        let mut codebooks: Vec<(PretrainTarget, SpectralCodebook)> = Vec::new();
        for cell in cells.iter_mut() {
            let cfg = ModelConfig { pe_type: cell.pe_type, ..settings.model.clone() };
            let target = cell.pretrain_target;
            let init = match target.feature() {
                None => None,
                Some(feature) => {
                    if !codebooks.iter().any(|(t, _)| *t == target) {
                        let cb = SpectralCodebook::fit_segments(
                            train,
                            cfg.codebook_size,
                            seeds.data,
                            &settings.stft,
                            feature,
                            cfg.patch_len,
                        )?;
                        codebooks.push((target, cb));
                    }
                    let cb = &codebooks.iter().find(|(t, _)| *t == target).unwrap().1;
                    let (p, report) = pretrain_loop(&cfg, &settings.pretrain, &seeds, train, cb, target)?;
                    cell.pretrain_reports.push(report);
                    Some(p)
                }
            };
            let (params, mut report) = finetune_loop(&cfg, &settings.finetune, &seeds, train, init, target)?;
            let m = evaluate(&cfg, &params, test)?;
            let r2 = m.r2.ok_or_else(|| Error::Numerical("test targets have no variance".into()))?;
            cell.seeds.push(seed);
            cell.test_r2.push(r2);
            cell.test_mse.push(m.mse);
            cell.test_mae.push(m.mae);
            report.metrics = Some(m);
            cell.finetune_reports.push(report);
        }
    }
    for cell in cells.iter_mut() {
        let (mean, std) = mean_std(&cell.test_r2);
        cell.mean_r2 = mean;
        cell.std_r2 = std;
    }
    let mut table = AblationTable { cells, ordering: None };
    table.ordering = table.ordering_check();
    Ok(table)
}
