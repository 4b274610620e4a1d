//! Regression metrics over a set of segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean R² over the DoFs whose targets vary; `None` when none do.
    pub r2: Option<f64>,
    pub r2_per_dof: Vec<Option<f64>>,
    /// DoFs left out of the R² average because their targets are constant.
    pub excluded_dofs: usize,
    pub segments: usize,
}

/// MSE and MAE over every (segment, DoF) value; R² per DoF across segments.
pub fn regression_metrics(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Metrics> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::DimensionMismatch { expected: targets.len(), found: predictions.len() });
    }
    let dof = targets[0].len();
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != dof || t.len() != dof {
            return Err(Error::DimensionMismatch { expected: dof, found: p.len().min(t.len()) });
        }
    }
    let s = targets.len() as f64;
    let count = s * dof as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            mse += (a - b) * (a - b);
            mae += (a - b).abs();
        }
    }
    let mut r2_per_dof = Vec::with_capacity(dof);
    for f in 0..dof {
        let mean = targets.iter().map(|t| t[f]).sum::<f64>() / s;
        let ss_tot: f64 = targets.iter().map(|t| (t[f] - mean).powi(2)).sum();
        let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (p[f] - t[f]).powi(2)).sum();
        r2_per_dof.push((ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot));
    }
    let valid: Vec<f64> = r2_per_dof.iter().flatten().copied().collect();
    let r2 = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    let m = Metrics {
        mse: mse / count,
        mae: mae / count,
        r2,
        excluded_dofs: dof - valid.len(),
        r2_per_dof,
        segments: targets.len(),
    };
    if !m.mse.is_finite() || !m.mae.is_finite() || m.r2.is_some_and(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(m)
}
