use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::isp::{IspKind, PipelineSpec};
use crate::synth::{SceneConfig, SurrogateConfig};
use crate::trainer::TrainConfig;

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub synth: SceneConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            pipeline: PipelineSpec::from_kinds(&[IspKind::Gm]),
            controller: ControllerConfig::default(),
            surrogate: SurrogateConfig::default(),
            trainer: TrainConfig::default(),
            synth: SceneConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.controller.validate()?;
        self.trainer.validate()?;
        self.synth.validate()?;
        if self.surrogate.input_size != self.synth.size {
            return Err(Error::Config(format!(
                "surrogate.input_size {} differs from synth.size {}",
                self.surrogate.input_size, self.synth.size
            )));
        }
        if self.surrogate.stage1_channels == 0 || self.surrogate.head_channels == 0 {
            return Err(Error::Config("surrogate widths must be positive".into()));
        }
        Ok(())
    }

    /// Parses and validates. Unknown keys are rejected with their path.
    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = Config::default();
        c.validate().unwrap();
        let again = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_json(), again.to_json());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::default().to_json()).unwrap();
        v["controller"]["latent_widht"] = serde_json::json!(3);
        let err = Config::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("latent_widht"), "{err}");
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let mut c = Config::default();
        c.pipeline.stages[0].params[0].min = 9.0;
        assert!(Config::from_json(&c.to_json()).is_err());
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let text = r#"{"pipeline":{"stages":[{"kind":"cs","params":[{"name":"q_b","min":0.5,"max":1.5},{"name":"q_c","min":-0.5,"max":0.5}],"phat":[0,0]}]}}"#;
        let c = Config::from_json(text).unwrap();
        assert_eq!(c.pipeline.stages[0].kind, IspKind::Cs);
        assert_eq!(c.trainer, TrainConfig::default());
    }
}
