use spectre_core::nn::{load_params, write_checkpoint, ModelConfig, PeType};
use spectre_core::signal::{preprocess, read_dataset, synthesize_dataset, write_dataset, PreprocessConfig, SignalSegment, SynthConfig};
use spectre_core::spectral::{read_codebook, write_codebook, FeatureKind, SpectralCodebook, StftConfig};
use spectre_core::train::{
    evaluate, finetune_loop, pretrain_loop, run_ablation, AblationSettings, PhaseConfig, PretrainTarget, Seeds, TrainMode,
};
use spectre_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig { d: 16, layers: 1, heads: 2, codebook_size: 8, ..ModelConfig::desk() }
}

fn short(steps: u64) -> PhaseConfig {
    PhaseConfig { steps, warmup_steps: 1, batch_size: 2, ..PhaseConfig::pretrain_desk() }
}

fn segments(n: usize, seed: u64) -> Vec<SignalSegment> {
    let raw = synthesize_dataset(&SynthConfig { segments: n, seed, len: 1000, ..SynthConfig::default() }).unwrap();
    raw.iter().map(|s| preprocess(s, &PreprocessConfig::default()).unwrap()).collect()
}

fn codebook(segs: &[SignalSegment], cfg: &ModelConfig, kind: FeatureKind) -> SpectralCodebook {
    SpectralCodebook::fit_segments(segs, cfg.codebook_size, 0, &StftConfig::default(), kind, cfg.patch_len).unwrap()
}

#[test]
fn artifacts_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let segs = segments(3, 1);
    write_dataset(&dir.path().join("d.sptr"), &segs).unwrap();
    let back = read_dataset(&dir.path().join("d.sptr"), Some(cfg.patch_len)).unwrap();
    assert_eq!(back, segs);

    let cb = codebook(&segs, &cfg, FeatureKind::Stft);
    write_codebook(&dir.path().join("c.spcb"), &cb).unwrap();
    let cb2 = read_codebook(&dir.path().join("c.spcb")).unwrap();
    for s in &segs {
        assert_eq!(cb.label_segment(s).unwrap(), cb2.label_segment(s).unwrap());
    }

    let (params, _) = pretrain_loop(&cfg, &short(2), &Seeds::all(1), &segs, &cb, PretrainTarget::StftClusters).unwrap();
    let path = dir.path().join("nested/p.spck");
    write_checkpoint(&path, &params, &cfg).unwrap();
    load_params(&path, &cfg).unwrap();
    let other = ModelConfig { pe_type: PeType::Absolute, ..cfg.clone() };
    assert!(matches!(load_params(&path, &other), Err(Error::HashMismatch { .. })));
    assert!(matches!(read_dataset(&dir.path().join("absent.sptr"), None), Err(Error::MissingArtifact(_))));
}

#[test]
fn pretrain_then_finetune_then_evaluate() {
    let cfg = tiny();
    let train = segments(4, 2);
    let test = segments(2, 3);
    let cb = codebook(&train, &cfg, FeatureKind::Stft);
    let (pre, report) = pretrain_loop(&cfg, &short(4), &Seeds::all(2), &train, &cb, PretrainTarget::StftClusters).unwrap();
    assert_eq!(report.mode, TrainMode::Pretrain);
    assert_eq!(report.loss_curve.len(), 4);
    assert!(report.loss_curve.iter().all(|p| p.loss.is_finite()));
    assert_eq!(report.loss_curve[0].lr, 0.0);

    let (ft, ft_report) = finetune_loop(&cfg, &short(4), &Seeds::all(2), &train, Some(pre.clone()), PretrainTarget::StftClusters).unwrap();
    assert_eq!(ft_report.mode, TrainMode::Finetune);
    assert_eq!(ft_report.metrics.as_ref().unwrap().segments, train.len());
    let (scratch, _) = finetune_loop(&cfg, &short(4), &Seeds::all(2), &train, None, PretrainTarget::None).unwrap();
    assert_ne!(ft, scratch);

    let m = evaluate(&cfg, &ft, &test).unwrap();
    assert_eq!(m.segments, 2);
    assert!(m.mse.is_finite() && m.mae.is_finite());
}

#[test]
fn pretraining_refuses_mismatched_targets() {
    let cfg = tiny();
    let segs = segments(2, 4);
    let raw_cb = codebook(&segs, &cfg, FeatureKind::Raw);
    assert!(matches!(
        pretrain_loop(&cfg, &short(1), &Seeds::all(0), &segs, &raw_cb, PretrainTarget::StftClusters),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        pretrain_loop(&cfg, &short(1), &Seeds::all(0), &segs, &raw_cb, PretrainTarget::None),
        Err(Error::Config(_))
    ));
    pretrain_loop(&cfg, &short(1), &Seeds::all(0), &segs, &raw_cb, PretrainTarget::RawClusters).unwrap();
}

#[test]
fn seeds_change_runs_and_repeat_exactly() {
    let cfg = tiny();
    let segs = segments(4, 5);
    let cb = codebook(&segs, &cfg, FeatureKind::Stft);
    let run = |s: Seeds| {
        let (_, r) = pretrain_loop(&cfg, &short(3), &s, &segs, &cb, PretrainTarget::StftClusters).unwrap();
        r.loss_curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>()
    };
    let base = Seeds { data: 1, model: 2, mask: 3 };
    assert_eq!(run(base), run(base));
    assert_ne!(run(base), run(Seeds { mask: 4, ..base }));
    assert_ne!(run(base), run(Seeds { model: 5, ..base }));
    assert_ne!(run(base), run(Seeds { data: 6, ..base }));
}

#[test]
fn ablation_cells_share_seeds() {
    let settings = AblationSettings {
        model: tiny(),
        pretrain: short(2),
        finetune: short(2),
        stft: StftConfig::default(),
        seeds: vec![7, 8],
        cells: vec![(PeType::Cyrope, PretrainTarget::StftClusters), (PeType::Absolute, PretrainTarget::None)],
    };
    let table = run_ablation(&settings, &segments(4, 6), &segments(3, 7)).unwrap();
    assert_eq!(table.cells.len(), 2);
    assert!(table.ordering.is_none());
    for c in &table.cells {
        assert_eq!(c.seeds, vec![7, 8]);
        assert_eq!(c.test_r2.len(), 2);
        assert_eq!(c.finetune_reports.len(), 2);
        assert_eq!(c.finetune_reports[1].seeds, Seeds::all(8));
    }
    assert_eq!(table.cells[0].pretrain_reports.len(), 2);
    assert!(table.cells[1].pretrain_reports.is_empty());
}
