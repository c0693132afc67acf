//! Flat `key = value` run configuration. Command-line overrides win over the
//! file, which wins over the built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Scale;
use crate::error::{Error, Result};
use crate::loss::CosineMode;
use crate::optim::AdamConfig;
use crate::strategy::{ContentTap, SpeakerMode, StrategyConfig};
use crate::teacher::TeacherKind;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory or manifest JSON.
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub seed: u64,
    pub scale: Scale,
    pub strategy: String,
    /// Only read for custom strategy names.
    pub speaker_mode: Option<SpeakerMode>,
    pub content_tap: Option<ContentTap>,
    pub sr_augmentation: Option<bool>,
    pub tap_quantized: bool,
    pub freeze_speaker: bool,
    pub cosine_mode: CosineMode,
    pub steps: u64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: u64,
    pub reseed_every: u64,
    pub sr_ratio_min: f64,
    pub sr_ratio_max: f64,
    pub deterministic: bool,
    /// `desk-stub` or `external`.
    pub teacher: String,
    pub teacher_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(Scale::Tiny, StrategyConfig::v1(), 0);
        Self {
            data: None,
            out_dir: PathBuf::from("runs/default"),
            resume: None,
            seed: 0,
            scale: Scale::Tiny,
            strategy: "v1".into(),
            speaker_mode: None,
            content_tap: None,
            sr_augmentation: None,
            tap_quantized: false,
            freeze_speaker: false,
            cosine_mode: CosineMode::default(),
            steps: t.steps,
            batch_size: t.batch_size,
            segment_seconds: t.segment_seconds,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            checkpoint_every: t.checkpoint_every,
            reseed_every: t.reseed_every,
            sr_ratio_min: t.sr_ratio_min,
            sr_ratio_max: t.sr_ratio_max,
            deterministic: t.deterministic,
            teacher: "desk-stub".into(),
            teacher_dir: None,
        }
    }
}

/// Splits `key=value`; the value is read as a TOML scalar when possible and
/// as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = match format!("x = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

impl RunConfig {
    /// Layers `overrides` over `file` over the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Path(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
            return Err(Error::Config(format!("key `{k}` must hold a single value")));
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        let mut s = match self.strategy.parse::<StrategyConfig>() {
            Ok(s) => {
                if self.speaker_mode.is_some() || self.content_tap.is_some() || self.sr_augmentation.is_some() {
                    return Err(Error::Strategy(format!("preset `{}` is fixed; pick a custom name to change its settings", self.strategy)));
                }
                s
            }
            Err(_) => {
                let missing = || Error::Strategy(format!("custom strategy `{}` needs speaker_mode, content_tap and sr_augmentation", self.strategy));
                StrategyConfig::custom(
                    &self.strategy,
                    self.speaker_mode.ok_or_else(missing)?,
                    self.content_tap.ok_or_else(missing)?,
                    self.sr_augmentation.ok_or_else(missing)?,
                )?
            }
        };
        s.tap_quantized = self.tap_quantized;
        Ok(s)
    }

    pub fn teacher_kind(&self) -> Result<TeacherKind> {
        match self.teacher.as_str() {
            "desk-stub" => Ok(TeacherKind::DeskStub),
            "external" => Ok(TeacherKind::External { dir: self.teacher_dir.clone() }),
            other => Err(Error::Config(format!("unknown teacher `{other}` (expected desk-stub or external)"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.scale, self.strategy_config()?, self.seed);
        t.model.encoder.freeze_speaker = self.freeze_speaker;
        t.model.cosine_mode = self.cosine_mode;
        t.steps = self.steps;
        t.batch_size = self.batch_size;
        t.segment_seconds = self.segment_seconds;
        t.adam = AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps };
        t.checkpoint_every = self.checkpoint_every;
        t.reseed_every = self.reseed_every;
        t.sr_ratio_min = self.sr_ratio_min;
        t.sr_ratio_max = self.sr_ratio_max;
        t.deterministic = self.deterministic;
        t.teacher = self.teacher_kind()?;
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_override_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "steps = 50\nbatch_size = 2\nstrategy = \"v3\"\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["steps=7".into()]).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.strategy, "v3");
        assert_eq!(cfg.reseed_every, RunConfig::default().reseed_every);
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("lr=1e-3").unwrap().1, toml::Value::Float(1e-3));
        assert_eq!(parse_override(" out_dir = runs/a ").unwrap(), ("out_dir".into(), toml::Value::String("runs/a".into())));
        assert_eq!(parse_override("deterministic=false").unwrap().1, toml::Value::Boolean(false));
        assert!(parse_override("steps").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn unknown_and_nested_keys_are_rejected() {
        assert!(matches!(RunConfig::resolve(None, &["stpes=3".into()]), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nseed = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some(&dir.path().join("none.toml")), &[]), Err(Error::Path(_))));
    }

    #[test]
    fn builds_train_configs() {
        let cfg = RunConfig::resolve(None, &["strategy=v2".into(), "seed=9".into(), "freeze_speaker=true".into(), "cosine_mode=per_frame".into()]).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.model.strategy, StrategyConfig::v2());
        assert_eq!(t.model.seed, 9);
        assert!(t.model.encoder.freeze_speaker);
        assert_eq!(t.model.cosine_mode, CosineMode::PerFrame);

        let preset_edit = RunConfig::resolve(None, &["strategy=v1".into(), "sr_augmentation=true".into()]).unwrap();
        assert!(matches!(preset_edit.train_config(), Err(Error::Strategy(_))));
        let custom = RunConfig::resolve(None, &["strategy=mix".into(), "speaker_mode=gvq".into(), "content_tap=decoder_output".into(), "sr_augmentation=true".into()]).unwrap();
        let s = custom.train_config().unwrap().model.strategy;
        assert_eq!((s.name.as_str(), s.speaker_mode, s.content_loss_tap, s.sr_augmentation), ("mix", SpeakerMode::Gvq, ContentTap::DecoderOutput, true));
        assert!(RunConfig::resolve(None, &["strategy=mix".into()]).unwrap().train_config().is_err());
        assert!(RunConfig::resolve(None, &["batch_size=0".into()]).unwrap().train_config().is_err());
    }
}
