use std::path::Path;

use anyhow::{Context, Result};
use gdm_core::nn::{AdamConfig, UNetSpec};
use gdm_core::preprocess::{AfmParams, SemParams, StmParams};
use gdm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// JSON configuration file. Every section is optional; command-line flags
/// override whatever is set here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdmConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub model: UNetSpec,
    pub adam: AdamConfig,
    pub stm: StmParams,
    pub afm: AfmParams,
    pub sem: SemParams,
}

impl GdmConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { schema_version: CONFIG_SCHEMA_VERSION, ..Default::default() });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: GdmConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        anyhow::ensure!(
            cfg.schema_version == CONFIG_SCHEMA_VERSION,
            "config {} has schema_version {}, expected {CONFIG_SCHEMA_VERSION}",
            path.display(),
            cfg.schema_version
        );
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: GdmConfig =
            serde_json::from_str(r#"{"schema_version": 1, "train": {"epochs": 3}, "stm": {"r_low": 10}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.stm.r_low, 10.0);
        assert_eq!(cfg.stm.r_high, 60.0);
        assert_eq!(cfg.sem.threshold, 130.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<GdmConfig>(r#"{"schema_version": 1, "trian": {}}"#).is_err());
        assert!(serde_json::from_str::<GdmConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema_version": 7}"#).unwrap();
        assert!(GdmConfig::load(Some(&p)).is_err());
        std::fs::write(&p, r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(GdmConfig::load(Some(&p)).unwrap().train, TrainConfig::default());
    }
}
