use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{metrics::default_thresholds, LossConfig, OdsMode, TrainConfig};

/// Where samples come from: a dataset directory, or the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub synth_n: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth_n: 10,
            synth_size: 64,
            synth_seed: 0,
            synth: SynthParams::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<super::Dataset> {
        match &self.dir {
            Some(d) => super::Dataset::load(d),
            None => super::synth_crack_dataset(self.synth_n, self.synth_size, self.synth_seed, &self.synth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Threshold for P, R, F1 and mIoU.
    pub threshold: f64,
    /// Grid swept for ODS and OIS.
    pub thresholds: Vec<f64>,
    pub ods_mode: OdsMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            thresholds: default_thresholds(),
            ods_mode: OdsMode::Pooled,
        }
    }
}

/// Everything a run needs, stored as one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let t = &self.eval.thresholds;
        if t.is_empty() || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("eval thresholds must be a non-empty list in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("eval threshold {} outside [0, 1]", self.eval.threshold)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrds::ConvKind;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.loss.alpha, c.loss.beta), (0.75, 0.25));
        assert_eq!((c.train.lr, c.train.weight_decay, c.train.epochs, c.train.decay_epoch, c.train.batch_size), (0.0005, 0.0001, 60, 30, 1));
        assert_eq!(c.eval.thresholds.len(), 99);
    }

    #[test]
    fn round_trip_and_overrides() {
        let c = RunConfig::from_toml(
            "seed = 4\n[model]\nconv = \"ds\"\n[model.backbone]\nunified_channels = 16\n[loss]\nalpha = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.model.conv, ConvKind::Ds);
        assert_eq!(c.model.backbone.unified_channels, 16);
        assert_eq!(c.loss.alpha, 0.5);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nconv = \"fancy\"\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[loss]\nalpha = -1.0\n"), Err(Error::Config(_))));
    }
}
