//! Training strategies: how the speaker is represented, where the content
//! loss taps the network, and whether resize augmentation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitstream::StrategyTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMode {
    Continuous,
    Gvq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentTap {
    EncoderOutput,
    DecoderOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// `v1`, `v2`, `v3`, or a custom name.
    pub name: String,
    pub speaker_mode: SpeakerMode,
    pub content_loss_tap: ContentTap,
    pub sr_augmentation: bool,
    /// Tap the encoder after quantization instead of before.
    #[serde(default)]
    pub tap_quantized: bool,
}

const TABLE: [(&str, SpeakerMode, ContentTap, bool); 3] = [
    ("v1", SpeakerMode::Continuous, ContentTap::EncoderOutput, false),
    ("v2", SpeakerMode::Gvq, ContentTap::EncoderOutput, false),
    ("v3", SpeakerMode::Continuous, ContentTap::DecoderOutput, true),
];

impl StrategyConfig {
    fn preset(i: usize) -> Self {
        let (name, speaker_mode, content_loss_tap, sr_augmentation) = TABLE[i];
        Self { name: name.into(), speaker_mode, content_loss_tap, sr_augmentation, tap_quantized: false }
    }

    pub fn v1() -> Self {
        Self::preset(0)
    }

    pub fn v2() -> Self {
        Self::preset(1)
    }

    pub fn v3() -> Self {
        Self::preset(2)
    }

    /// Any other combination; the name must not shadow a preset.
    pub fn custom(name: &str, speaker_mode: SpeakerMode, content_loss_tap: ContentTap, sr_augmentation: bool) -> Result<Self> {
        let s = Self { name: name.into(), speaker_mode, content_loss_tap, sr_augmentation, tap_quantized: false };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let lower = self.name.to_ascii_lowercase();
        if let Some(i) = TABLE.iter().position(|t| t.0 == lower) {
            let p = Self::preset(i);
            if (p.speaker_mode, p.content_loss_tap, p.sr_augmentation) != (self.speaker_mode, self.content_loss_tap, self.sr_augmentation) {
                return Err(Error::Strategy(format!("{} has a fixed configuration; use a custom name for other combinations", self.name)));
            }
        } else if self.name.trim().is_empty() {
            return Err(Error::Strategy("custom strategies need a name".into()));
        }
        Ok(())
    }

    pub fn is_preset(&self) -> bool {
        TABLE.iter().any(|t| t.0 == self.name.to_ascii_lowercase())
    }

    /// Stream tag: the preset's own, or the preset sharing the speaker layout.
    pub fn tag(&self) -> StrategyTag {
        match self.name.to_ascii_lowercase().as_str() {
            "v1" => StrategyTag::V1,
            "v2" => StrategyTag::V2,
            "v3" => StrategyTag::V3,
            _ => match self.speaker_mode {
                SpeakerMode::Gvq => StrategyTag::V2,
                SpeakerMode::Continuous => StrategyTag::V1,
            },
        }
    }
}

impl FromStr for StrategyConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Self::v1()),
            "v2" => Ok(Self::v2()),
            "v3" => Ok(Self::v3()),
            other => Err(Error::Strategy(format!("unknown strategy `{other}` (expected v1, v2 or v3)"))),
        }
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table() {
        assert_eq!(
            (StrategyConfig::v1().speaker_mode, StrategyConfig::v1().content_loss_tap, StrategyConfig::v1().sr_augmentation),
            (SpeakerMode::Continuous, ContentTap::EncoderOutput, false)
        );
        assert_eq!(
            (StrategyConfig::v2().speaker_mode, StrategyConfig::v2().content_loss_tap, StrategyConfig::v2().sr_augmentation),
            (SpeakerMode::Gvq, ContentTap::EncoderOutput, false)
        );
        assert_eq!(
            (StrategyConfig::v3().speaker_mode, StrategyConfig::v3().content_loss_tap, StrategyConfig::v3().sr_augmentation),
            (SpeakerMode::Continuous, ContentTap::DecoderOutput, true)
        );
        assert_eq!("V2".parse::<StrategyConfig>().unwrap(), StrategyConfig::v2());
        assert!("v4".parse::<StrategyConfig>().is_err());
    }

    #[test]
    fn other_combinations_need_a_custom_name() {
        let mut s = StrategyConfig::v1();
        s.sr_augmentation = true;
        assert!(matches!(s.validate(), Err(Error::Strategy(_))));
        assert!(StrategyConfig::custom("v2", SpeakerMode::Gvq, ContentTap::DecoderOutput, true).is_err());
        let c = StrategyConfig::custom("gvq-decoder", SpeakerMode::Gvq, ContentTap::DecoderOutput, true).unwrap();
        assert!(!c.is_preset());
        assert_eq!(c.tag(), StrategyTag::V2);
        assert!(StrategyConfig::custom(" ", SpeakerMode::Gvq, ContentTap::DecoderOutput, true).is_err());
    }
}
