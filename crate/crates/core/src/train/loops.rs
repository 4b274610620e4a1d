//! Pre-training and fine-tuning loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{regression_metrics, Metrics};
use super::optim::{adamw_step, OptimState};
use super::{derive_seed, sample_mask, LossPoint, PhaseConfig, PretrainTarget, RunReport, Seeds, TrainMode};
use crate::error::{Error, Result};
use crate::nn::encoder::Dropout;
use crate::nn::{Model, ModelConfig, ModelParams, PatchInput};
use crate::signal::SignalSegment;
use crate::spectral::SpectralCodebook;

const SHUFFLE_TAG: u64 = 0x5_4ff1e;
const MASK_TAG: u64 = 0x3a5c;
const DROPOUT_TAG: u64 = 0xd40f;

/// Endless stream of indices, reshuffled each epoch from the data seed.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: 0, epoch: 0, seed };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ SHUFFLE_TAG, self.epoch));
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn inputs(segments: &[SignalSegment], cfg: &ModelConfig) -> Result<Vec<PatchInput>> {
    if segments.is_empty() {
        return Err(Error::config("no segments to train on"));
    }
    segments.iter().map(|s| PatchInput::from_segment(s, cfg)).collect()
}

/// Pseudo-labels for every segment; checks the codebook against the model.
pub fn pseudo_labels(
    segments: &[SignalSegment],
    codebook: &SpectralCodebook,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<usize>>> {
    if codebook.k != cfg.codebook_size {
        return Err(Error::DimensionMismatch { expected: cfg.codebook_size, found: codebook.k });
    }
    if codebook.patch_len != cfg.patch_len {
        return Err(Error::DimensionMismatch { expected: cfg.patch_len, found: codebook.patch_len });
    }
    segments.iter().map(|s| codebook.label_segment(s)).collect()
}

fn dropout_rng(cfg: &ModelConfig, seeds: &Seeds) -> Option<ChaCha8Rng> {
    (cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(derive_seed(seeds.mask, DROPOUT_TAG)))
}

fn check_loss(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss at step {step}")))
    }
}

/// Masked pseudo-label prediction from a fresh initialisation.
pub fn pretrain_loop(
    cfg: &ModelConfig,
    phase: &PhaseConfig,
    seeds: &Seeds,
    segments: &[SignalSegment],
    codebook: &SpectralCodebook,
    target: PretrainTarget,
) -> Result<(ModelParams, RunReport)> {
    let start = Instant::now();
    phase.validate()?;
    if target == PretrainTarget::None {
        return Err(Error::config("pretrain_target none has nothing to pre-train"));
    }
    if target.feature() != Some(codebook.feature) {
        return Err(Error::config(format!("codebook features {:?} do not match target {target:?}", codebook.feature)));
    }
    let model = Model::new(cfg.clone())?;
    let inputs = inputs(segments, cfg)?;
    let labels = pseudo_labels(segments, codebook, cfg)?;
    let mut params = ModelParams::init(cfg, seeds.model)?;
    let mut state = OptimState::new(&params, phase.adamw())?;
    let mut stream = BatchStream::new(inputs.len(), seeds.data);
    let mut drop_rng = dropout_rng(cfg, seeds);
    let mut curve = Vec::with_capacity(phase.steps as usize);
    for step in 0..phase.steps {
        let batch = stream.next_batch(phase.batch_size);
        let mut grads = params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (slot, &i) in batch.iter().enumerate() {
            let plan = sample_mask(inputs[i].len(), cfg.mask_ratio, derive_seed(seeds.mask ^ MASK_TAG, step << 16 | slot as u64))?;
            let mut drop = drop_rng.as_mut().map(|rng| Dropout { p: cfg.dropout, rng });
            loss += scale
                * model.ssl_loss(&params, &inputs[i], &labels[i], &plan.masked, Some((&mut grads, scale)), drop.as_mut())?;
        }
        check_loss(loss, step)?;
        let lr = adamw_step(&mut params, &grads, &mut state);
        curve.push(LossPoint { step, lr, loss });
    }
    if !params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    let report = RunReport {
        mode: TrainMode::Pretrain,
        pretrain_target: target,
        pe_type: cfg.pe_type,
        mask_style: cfg.mask_style,
        seeds: *seeds,
        config_hash: cfg.hash(),
        segments: segments.len(),
        loss_curve: curve,
        metrics: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

fn targets_of(segments: &[SignalSegment], cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    segments
        .iter()
        .map(|s| {
            let t = s.targets.as_ref().ok_or_else(|| Error::config("segment has no kinematic targets"))?;
            if t.len() != cfg.dof {
                return Err(Error::DimensionMismatch { expected: cfg.dof, found: t.len() });
            }
            Ok(t.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

/// Kinematics regression, from `init` or a fresh initialisation. The report
/// carries training-set metrics.
pub fn finetune_loop(
    cfg: &ModelConfig,
    phase: &PhaseConfig,
    seeds: &Seeds,
    segments: &[SignalSegment],
    init: Option<ModelParams>,
    pretrain_target: PretrainTarget,
) -> Result<(ModelParams, RunReport)> {
    let start = Instant::now();
    phase.validate()?;
    let model = Model::new(cfg.clone())?;
    let inputs = inputs(segments, cfg)?;
    let targets = targets_of(segments, cfg)?;
    let mut params = match init {
        Some(p) => {
            p.check_shapes(cfg)?;
            p
        }
        None => ModelParams::init(cfg, seeds.model)?,
    };
    let mut state = OptimState::new(&params, phase.adamw())?;
    let mut stream = BatchStream::new(inputs.len(), seeds.data);
    let mut drop_rng = dropout_rng(cfg, seeds);
    let mut curve = Vec::with_capacity(phase.steps as usize);
    for step in 0..phase.steps {
        let batch = stream.next_batch(phase.batch_size);
        let mut grads = params.zeros_like();
        let scale = 1.0 / (batch.len() * cfg.dof) as f64;
        let mut loss = 0.0;
        for &i in &batch {
            let mut drop = drop_rng.as_mut().map(|rng| Dropout { p: cfg.dropout, rng });
            loss += scale
                * model.finetune_loss(&params, &inputs[i], &targets[i], Some((&mut grads, scale)), drop.as_mut())?;
        }
        check_loss(loss, step)?;
        let lr = adamw_step(&mut params, &grads, &mut state);
        curve.push(LossPoint { step, lr, loss });
    }
    if !params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    let metrics = evaluate(cfg, &params, segments)?;
    let report = RunReport {
        mode: TrainMode::Finetune,
        pretrain_target,
        pe_type: cfg.pe_type,
        mask_style: cfg.mask_style,
        seeds: *seeds,
        config_hash: cfg.hash(),
        segments: segments.len(),
        loss_curve: curve,
        metrics: Some(metrics),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

pub fn predict_all(cfg: &ModelConfig, params: &ModelParams, segments: &[SignalSegment]) -> Result<Vec<Vec<f64>>> {
    let model = Model::new(cfg.clone())?;
    segments
        .iter()
        .map(|s| model.predict(params, &PatchInput::from_segment(s, cfg)?))
        .collect()
}

/// MSE, MAE and R² of the model's predictions on `segments`.
pub fn evaluate(cfg: &ModelConfig, params: &ModelParams, segments: &[SignalSegment]) -> Result<Metrics> {
    let targets = targets_of(segments, cfg)?;
    let preds = predict_all(cfg, params, segments)?;
    regression_metrics(&preds, &targets)
}
