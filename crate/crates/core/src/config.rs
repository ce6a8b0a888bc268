//! Run configuration shared by the command line and the ablation runner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::pipeline::PipelineConfig;
use crate::scene::SceneConfig;
use crate::{Error, Result};

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pipeline.validate()?;
        self.ablation.validate()
    }

    /// Reads a JSON document; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"pipeline": {"iterations": 2}}"#).unwrap();
        assert_eq!(cfg.pipeline.iterations, 2);
        assert_eq!(cfg.pipeline.alpha, 0.15);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
