use std::path::Path;

use spectre_core::nn::{load_params, read_checkpoint, write_checkpoint, ModelParams};
use spectre_core::signal::{preprocess, read_dataset, synthesize_dataset, write_dataset, SignalSegment, SynthConfig};
use spectre_core::spectral::{read_codebook, write_codebook, FeatureKind, SpectralCodebook};
use spectre_core::train::{
    evaluate, finetune_loop, pretrain_loop, run_ablation, AblationSettings, PretrainTarget, RunReport, TrainMode,
};
use spectre_core::{CyRopeTable, Error, Result, RunConfig};

use crate::ConfigArgs;

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.set)
}

fn data(cfg: &RunConfig, path: &Path) -> Result<Vec<SignalSegment>> {
    let m = cfg.model_config()?;
    let segs = read_dataset(path, Some(m.patch_len))?;
    if let Some(s) = segs.first() {
        if s.channels != m.channels {
            return Err(Error::DimensionMismatch { expected: m.channels, found: s.channels });
        }
    }
    Ok(segs)
}

fn make_set(synth: &SynthConfig, cfg: &RunConfig) -> Result<Vec<SignalSegment>> {
    synthesize_dataset(synth)?.iter().map(|s| preprocess(s, &cfg.preprocess)).collect()
}

pub fn synth(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let train_path = cfg.train_data_path();
    let train = make_set(&cfg.synth, &cfg)?;
    write_dataset(&train_path, &train)?;
    eprintln!("wrote {} segments to {}", train.len(), train_path.display());
    if cfg.test_segments > 0 {
        let test_cfg = SynthConfig {
            segments: cfg.test_segments,
            seed: cfg.synth.seed.wrapping_add(0x7e57),
            ..cfg.synth.clone()
        };
        let test = make_set(&test_cfg, &cfg)?;
        let p = cfg.test_data_path();
        write_dataset(&p, &test)?;
        eprintln!("wrote {} segments to {}", test.len(), p.display());
    }
    Ok(())
}

fn feature_of(cfg: &RunConfig) -> Result<FeatureKind> {
    cfg.pretrain_target
        .feature()
        .ok_or_else(|| Error::Config("pretrain_target none uses no codebook".into()))
}

pub fn codebook(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let m = cfg.model_config()?;
    let feature = feature_of(&cfg)?;
    let train = data(&cfg, &cfg.train_data_path())?;
    let cb = SpectralCodebook::fit_segments(&train, m.codebook_size, cfg.seeds.data, &cfg.stft, feature, m.patch_len)?;
    let out = cfg.codebook_path();
    write_codebook(&out, &cb)?;
    eprintln!("codebook K={} D={} inertia={:.6e} -> {}", cb.k, cb.dim, cb.inertia, out.display());
    Ok(())
}

fn write_report(cfg: &RunConfig, name: &str, report: &RunReport) -> Result<()> {
    let dir = cfg.out_dir.join(name);
    report.write(&dir)?;
    eprintln!("report -> {}", dir.join("report.json").display());
    Ok(())
}

pub fn pretrain(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let m = cfg.model_config()?;
    feature_of(&cfg)?;
    let cb = read_codebook(&cfg.codebook_path())?;
    let train = data(&cfg, &cfg.train_data_path())?;
    let (params, report) = pretrain_loop(&m, &cfg.pretrain, &cfg.seeds, &train, &cb, cfg.pretrain_target)?;
    write_checkpoint(&cfg.pretrained_path(), &params, &m)?;
    eprintln!(
        "pretrain: {} steps, final loss {:.4} -> {}",
        report.loss_curve.len(),
        report.final_loss().unwrap_or(f64::NAN),
        cfg.pretrained_path().display()
    );
    write_report(&cfg, "pretrain", &report)
}

pub fn finetune(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let m = cfg.model_config()?;
    let init: Option<ModelParams> = match cfg.pretrain_target {
        PretrainTarget::None => None,
        _ => Some(load_params(&cfg.pretrained_path(), &m)?),
    };
    let train = data(&cfg, &cfg.train_data_path())?;
    let (params, report) = finetune_loop(&m, &cfg.finetune, &cfg.seeds, &train, init, cfg.pretrain_target)?;
    write_checkpoint(&cfg.finetuned_path(), &params, &m)?;
    if let Some(mt) = &report.metrics {
        eprintln!("finetune: train mse {:.5} -> {}", mt.mse, cfg.finetuned_path().display());
    }
    write_report(&cfg, "finetune", &report)
}

pub fn eval(args: ConfigArgs) -> Result<()> {
    let start = std::time::Instant::now();
    let cfg = load(&args)?;
    let m = cfg.model_config()?;
    let params = load_params(&cfg.finetuned_path(), &m)?;
    let test = data(&cfg, &cfg.test_data_path())?;
    let metrics = evaluate(&m, &params, &test)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    let report = RunReport {
        mode: TrainMode::Eval,
        pretrain_target: cfg.pretrain_target,
        pe_type: m.pe_type,
        mask_style: m.mask_style,
        seeds: cfg.seeds,
        config_hash: m.hash(),
        segments: test.len(),
        loss_curve: Vec::new(),
        metrics: Some(metrics),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_report(&cfg, "eval", &report)
}

pub fn ablate(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let settings = AblationSettings {
        model: cfg.model_config()?,
        pretrain: cfg.pretrain.clone(),
        finetune: cfg.finetune.clone(),
        stft: cfg.stft.clone(),
        seeds: cfg.ablation_seeds.clone(),
        cells: AblationSettings::full_grid(),
    };
    let train = data(&cfg, &cfg.train_data_path())?;
    let test = data(&cfg, &cfg.test_data_path())?;
    let table = run_ablation(&settings, &train, &test)?;
    for c in &table.cells {
        println!(
            "{:<9} {:<14} R2 {:+.4} ± {:.4}",
            serde_json::to_value(c.pe_type)?.as_str().unwrap_or(""),
            serde_json::to_value(c.pretrain_target)?.as_str().unwrap_or(""),
            c.mean_r2,
            c.std_r2
        );
    }
    if let Some(o) = &table.ordering {
        println!("ordering holds: {}", o.holds);
    }
    let out = cfg.out_dir.join("ablation.json");
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(&out, serde_json::to_string_pretty(&table)?)?;
    eprintln!("table -> {}", out.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut magic = [0u8; 4];
    let head = std::fs::read(path)?;
    if head.len() < 4 {
        return Err(Error::Truncated(format!("{} is shorter than a header", path.display())));
    }
    magic.copy_from_slice(&head[..4]);
    match &magic {
        b"SPTR" => {
            let segs = read_dataset(path, None)?;
            let first = segs.first();
            println!("dataset {}", path.display());
            println!("segments: {}", segs.len());
            if let Some(s) = first {
                println!("channels: {}", s.channels);
                println!("length: {}", s.len);
                println!("dof: {}", s.dof());
                println!("sample_rate_hz: {}", s.sample_rate);
            }
        }
        b"SPCB" => {
            let cb = read_codebook(path)?;
            println!("codebook {}", path.display());
            println!("K: {}", cb.k);
            println!("D_s: {}", cb.dim);
            println!("feature: {}", serde_json::to_value(cb.feature)?.as_str().unwrap_or(""));
            println!("stft: window {} hop {} log {}", cb.stft.window_len, cb.stft.hop, cb.stft.log_magnitude);
            println!("patch_len: {}", cb.patch_len);
            println!("fit_seed: {}", cb.fit_seed);
            println!("inertia: {:e}", cb.inertia);
        }
        b"SPCK" => {
            let ck = read_checkpoint(path)?;
            println!("checkpoint {}", path.display());
            println!("config_hash: {}", ck.hash_hex());
            println!("parameters: {}", ck.param_count());
            for (name, t) in &ck.tensors {
                println!("{name} {:?}", t.shape);
            }
        }
        _ => {
            return Err(Error::BadMagic { expected: *b"SP??", found: magic });
        }
    }
    Ok(())
}

pub fn inspect_rope(args: ConfigArgs) -> Result<()> {
    let cfg = load(&args)?;
    let m = cfg.model_config()?;
    let table = CyRopeTable::new(m.head_dim(), m.channels, m.temporal_base)?;
    print!("{}", table.frequency_csv());
    Ok(())
}
