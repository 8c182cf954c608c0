//! Run configuration: profiles, JSON config files, and CLI overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaptError};
use crate::model::EncoderConfig;
use crate::optim::AdamConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = ScaptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(ScaptError::Config(format!(
                "unknown profile '{other}', expected desk or paper"
            ))),
        }
    }
}

/// Everything a pretrain or finetune run needs, resolved before any work
/// starts. Serialized verbatim into the run manifest and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 42,
            epochs: 3,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 100,
            encoder: EncoderConfig::desk(),
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            seed: 42,
            epochs: 10,
            batch_size: 64,
            base_lr: 1e-4,
            warmup_steps: 2000,
            encoder: EncoderConfig::paper(),
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScaptError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ScaptError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size < 4 {
            return Err(ScaptError::Config("batch_size must be at least 4".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(ScaptError::Config("base_lr must be positive".into()));
        }
        if self.pretrain.tau <= 0.0 {
            return Err(ScaptError::Config("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.mask_floor) {
            return Err(ScaptError::Config("mask_floor must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// CLI flag values layered over a base config; `None` means "keep".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.base_lr = v;
        }
        if let Some(v) = self.tau {
            config.pretrain.tau = v;
        }
        if let Some(v) = self.alpha {
            config.pretrain.alpha = v;
        }
        if let Some(v) = self.beta {
            config.pretrain.beta = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_validates() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let config = RunConfig::desk();
        let text = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.profile, Profile::Desk);
        assert_eq!(back.batch_size, config.batch_size);
        assert_eq!(back.pretrain.tau, config.pretrain.tau);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut config = RunConfig::desk();
        let overrides = Overrides {
            seed: Some(9),
            lr: Some(5e-4),
            tau: Some(0.2),
            ..Overrides::default()
        };
        overrides.apply(&mut config);
        assert_eq!(config.seed, 9);
        assert_eq!(config.base_lr, 5e-4);
        assert_eq!(config.pretrain.tau, 0.2);
        // untouched fields keep profile defaults
        assert_eq!(config.epochs, 3);
    }

    #[test]
    fn bad_values_rejected() {
        let mut config = RunConfig::desk();
        config.batch_size = 2;
        assert!(config.validate().is_err());
        let mut config = RunConfig::desk();
        config.pretrain.tau = 0.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::desk();
        config.pretrain.mask_floor = 1.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn load_reports_path_in_error() {
        let err = RunConfig::load(Path::new("/nonexistent/config.json")).unwrap_err();
        assert!(err.to_string().contains("config.json"));
    }

    #[test]
    fn profile_parses_from_str() {
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert!("large".parse::<Profile>().is_err());
    }
}
