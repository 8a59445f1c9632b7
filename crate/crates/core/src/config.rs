//! Run configuration: a TOML file over built-in defaults, with dotted
//! `key=value` overrides taking precedence over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::DegradationConfig;
use crate::diffusion::{AdamWConfig, SampleConfig, ScheduleConfig, UNetConfig};
use crate::dsg::GuidanceMode;
use crate::error::{Error, Result};
use crate::metrics::{MetricPlugin, DEFAULT_CROP_BORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    /// Which dense guidance reaches the fusion modules.
    pub guidance: GuidanceMode,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub degradation: DegradationConfig,
    pub prompting: PromptingConfig,
    pub backends: BackendsConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            guidance: GuidanceMode::Full,
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            degradation: DegradationConfig::default(),
            prompting: PromptingConfig::default(),
            backends: BackendsConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Class names from the segmentation map.
    #[default]
    Labels,
    /// Per-image prompts from a tag file.
    Tags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptingConfig {
    pub mode: PromptMode,
    pub min_area_fraction: f64,
    /// `id<TAB>prompt` lines; required in `tags` mode.
    pub tags_file: Option<PathBuf>,
}

impl Default for PromptingConfig {
    fn default() -> Self {
        PromptingConfig {
            mode: PromptMode::Labels,
            min_area_fraction: 0.0,
            tags_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub segmenter: SegmenterConfig,
    pub text_encoder: TextEncoderConfig,
    /// Only `conv-stub` is built in.
    pub lr_encoder: String,
    /// Optional replacement for the built-in class list (`index<TAB>name`).
    pub taxonomy_file: Option<PathBuf>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            segmenter: SegmenterConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            lr_encoder: "conv-stub".into(),
            taxonomy_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    #[default]
    Toy,
    /// Precomputed label PNGs in `dir`.
    File,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    /// Band classes for the toy segmenter, darkest first.
    pub classes: Vec<u8>,
    pub dir: Option<PathBuf>,
    pub program: Option<String>,
    pub args: Vec<String>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            kind: SegmenterKind::Toy,
            classes: crate::segmentation::ToySegmenter::DEFAULT_CLASSES.to_vec(),
            dir: None,
            program: None,
            args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextEncoderKind {
    #[default]
    Hash,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    pub dim: usize,
    pub seed: u64,
    pub program: Option<String>,
    pub args: Vec<String>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            kind: TextEncoderKind::Hash,
            dim: 1024,
            seed: 0,
            program: None,
            args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub log_every: u64,
    /// Also keep `checkpoint_<step>.safetensors` every this many steps; 0 keeps only the latest.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub crop_border: usize,
    pub plugins: Vec<MetricPlugin>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            crop_border: DEFAULT_CROP_BORDER,
            plugins: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degradation.validate()?;
        self.schedule.build()?;
        if self.model.text_dim != self.backends.text_encoder.dim {
            return Err(Error::Config(format!(
                "model.text_dim ({}) must equal backends.text_encoder.dim ({})",
                self.model.text_dim, self.backends.text_encoder.dim
            )));
        }
        if !(0.0..1.0).contains(&self.prompting.min_area_fraction) {
            return Err(Error::Config("prompting.min_area_fraction must be in [0, 1)".into()));
        }
        if self.prompting.mode == PromptMode::Tags && self.prompting.tags_file.is_none() {
            return Err(Error::Config("prompting.mode = \"tags\" needs prompting.tags_file".into()));
        }
        if self.backends.lr_encoder != "conv-stub" {
            return Err(Error::Config(format!(
                "unknown LR encoder `{}` (only conv-stub is built in)",
                self.backends.lr_encoder
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.sample.guidance_scale.is_finite()) {
            return Err(Error::Config("sample.guidance_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` inside `table`. The value is parsed as a TOML value
/// when possible (numbers, booleans, arrays, quoted strings) and taken as a
/// bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nbase_chanels = 3").is_err());
    }

    #[test]
    fn overrides_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\n[train]\nsteps = 10\nbatch_size = 2\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.steps=20".into(), "guidance=no-mask".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.guidance, GuidanceMode::NoMask);
        assert_eq!(cfg.schedule.train_steps, 1000);
    }

    #[test]
    fn override_values_parse_as_toml() {
        let cfg = RunConfig::resolve(
            None,
            &["model.channel_multipliers=[1, 1]".into(), "train.optimizer.lr=1e-3".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.channel_multipliers, vec![1, 1]);
        assert_eq!(cfg.train.optimizer.lr, 1e-3);
        assert!(matches!(
            RunConfig::resolve(None, &["nonsense".into()]),
            Err(Error::Usage(_))
        ));
        assert!(RunConfig::resolve(None, &["seed=abc".into()]).is_err());
    }

    #[test]
    fn validation_catches_mismatched_dims() {
        assert!(RunConfig::resolve(None, &["model.text_dim=16".into()]).is_err());
        assert!(RunConfig::resolve(None, &["prompting.mode=tags".into()]).is_err());
    }
}
