//! Run configuration files: training settings plus where data comes from and where outputs go.
//!
//! Precedence is command-line flags, then the file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{generate_synthetic, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Stored beside the trainer outputs so later commands can find the dataset.
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory; exclusive with `synth`.
    pub dataset: Option<PathBuf>,
    /// Generates the dataset in memory instead of loading one.
    pub synth: Option<SynthSpec>,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(bytes: &[u8]) -> Result<RunConfig> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("set either dataset or synth, not both".into())),
            (None, None) => return Err(Error::Config("no dataset or synth spec given".into())),
            (None, Some(spec)) => spec.validate()?,
            _ => {}
        }
        if self.output_dir.is_none() {
            return Err(Error::Config("no output directory given".into()));
        }
        self.train.validate()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.dataset, &self.synth) {
            (Some(dir), None) => Dataset::load(dir),
            (None, Some(spec)) => generate_synthetic(spec),
            _ => Err(Error::Config("set exactly one of dataset or synth".into())),
        }
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_defaults_fill_in() {
        let c = RunConfig::from_json(br#"{"dataset": "d", "output_dir": "o", "train": {"epochs": 3, "loss": {"beta": 0.3}}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.loss.beta, 0.3);
        assert_eq!(c.train.loss.alpha, 25.0);
        assert_eq!(c.train.base_lr, TrainConfig::default().base_lr);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for bad in [
            r#"{"datset": "d"}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"train": {"loss": {"gamma": 1}}}"#,
            r#"{"train": {"model": {"hidden": 3}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad.as_bytes()), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn data_source_must_be_unique() {
        let both = RunConfig {
            dataset: Some("d".into()),
            synth: Some(SynthSpec::new(4, 2, 4, 3)),
            output_dir: Some("o".into()),
            ..RunConfig::default()
        };
        assert!(both.validate().is_err());
        let none = RunConfig {
            output_dir: Some("o".into()),
            ..RunConfig::default()
        };
        assert!(none.validate().is_err());
    }
}
