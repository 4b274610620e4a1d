//! Run configuration: one JSON document per run, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{MaskStyle, ModelConfig, PeType};
use crate::signal::{PreprocessConfig, SynthConfig};
use crate::spectral::StftConfig;
use crate::train::{PhaseConfig, PretrainTarget, Seeds};

/// Environment variable that replaces `out_dir`.
pub const OUT_ENV: &str = "SPECTRE_OUT";

/// Explicit values on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dof: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pe_type: Option<PeType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_style: Option<MaskStyle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_time_patches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal_base: Option<f64>,
}

/// Artifact locations; unset entries default to fixed names under `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    /// Pre-trained checkpoint written by `pretrain`, read by `finetune`.
    pub pretrained: Option<PathBuf>,
    /// Fine-tuned checkpoint written by `finetune`, read by `eval`.
    pub finetuned: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelOverrides,
    pub synth: SynthConfig,
    /// Segments in the held-out file written next to the training set.
    pub test_segments: usize,
    pub preprocess: PreprocessConfig,
    pub stft: StftConfig,
    pub pretrain_target: PretrainTarget,
    pub seeds: Seeds,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Seeds of the ablation grid; each sets all three named seeds.
    pub ablation_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelOverrides::default(),
            synth: SynthConfig { segments: 128, ..SynthConfig::default() },
            test_segments: 32,
            preprocess: PreprocessConfig::default(),
            stft: StftConfig::default(),
            pretrain_target: PretrainTarget::StftClusters,
            seeds: Seeds::default(),
            pretrain: PhaseConfig::pretrain_desk(),
            finetune: PhaseConfig::finetune_desk(),
            ablation_seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            paths: Paths::default(),
        }
    }
}

/// Sets `root[a][b]… = value` for the dotted `key`, creating objects on the way.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed key {key:?}")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::config(format!("{key:?}: {} is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!()
}

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Builds from an optional JSON document plus `key=value` overrides,
    /// applied in order. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::config(format!("config file {} not found", p.display())));
                }
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut root, &k, v)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::config(e.to_string()))?;
        if let Ok(out) = std::env::var(OUT_ENV) {
            if !out.is_empty() {
                cfg.out_dir = PathBuf::from(out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset merged with the explicit overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset)?;
        let o = &self.model;
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { m.$f = v; } )* };
        }
        take!(d, layers, heads, patch_len, channels, codebook_size, dof, mask_ratio, dropout, pe_type, mask_style, max_time_patches, temporal_base);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config()?;
        self.synth.validate()?;
        self.preprocess.validate(self.synth.sample_rate)?;
        self.stft.validate(m.patch_len)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.synth.channels != m.channels || self.synth.dof != m.dof {
            return Err(Error::config(format!(
                "synthetic data ({} channels, {} dof) does not match the model ({} channels, {} dof)",
                self.synth.channels, self.synth.dof, m.channels, m.dof
            )));
        }
        if self.synth.len % m.patch_len != 0 {
            return Err(Error::PatchMisalignment { len: self.synth.len, patch: m.patch_len });
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::config("ablation_seeds must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("run config serialises");
        Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn under_out(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.under_out(&self.paths.train_data, "train.sptr")
    }
    pub fn test_data_path(&self) -> PathBuf {
        self.under_out(&self.paths.test_data, "test.sptr")
    }
    pub fn codebook_path(&self) -> PathBuf {
        self.under_out(&self.paths.codebook, "codebook.spcb")
    }
    pub fn pretrained_path(&self) -> PathBuf {
        self.under_out(&self.paths.pretrained, "pretrain.spck")
    }
    pub fn finetuned_path(&self) -> PathBuf {
        self.under_out(&self.paths.finetuned, "finetune.spck")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate_and_resolve_desk() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model_config().unwrap(), ModelConfig::desk());
        assert_eq!(c.codebook_path(), PathBuf::from("runs/codebook.spcb"));
    }

    #[test]
    fn dotted_overrides_last_writer_wins() {
        let mut v = json!({});
        set_dotted(&mut v, "model.d", json!(32)).unwrap();
        set_dotted(&mut v, "model.d", json!(48)).unwrap();
        set_dotted(&mut v, "pretrain.steps", json!(7)).unwrap();
        assert_eq!(v, json!({"model": {"d": 48}, "pretrain": {"steps": 7}}));
        let mut s = json!({"a": 1});
        assert!(set_dotted(&mut s, "a.b", json!(1)).is_err());
        assert!(set_dotted(&mut s, "a..b", json!(1)).is_err());
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override("model.d=32").unwrap(), ("model.d".into(), json!(32)));
        assert_eq!(parse_override("model.pe_type=absolute").unwrap().1, json!("absolute"));
        assert_eq!(parse_override("ablation_seeds=[1,2]").unwrap().1, json!([1, 2]));
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::load(None, &["model.depth=3".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn overrides_reach_the_model() {
        let c = RunConfig::load(None, &["model.pe_type=absolute".into(), "preset=paper".into()]).unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.pe_type, PeType::Absolute);
        assert_eq!(m.d, 256);
    }

    #[test]
    fn invalid_values_rejected_before_work() {
        assert!(RunConfig::load(None, &["model.heads=3".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.len=2050".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.channels=8".into()]).is_err());
        assert!(RunConfig::load(None, &["finetune.batch_size=0".into()]).is_err());
        assert!(RunConfig::load(None, &["preset=huge".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.mask = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
