use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::harness::CostModel;
use crate::vit::{ToyDatasetSpec, TrainConfig, ViTConfig};

/// Everything an experiment run needs, as read from a JSON file. Missing
/// sections and keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vit: ViTConfig,
    pub attack: AttackConfig,
    pub cost: CostModel,
    pub dataset: ToyDatasetSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.attack.validate(self.vit.tau)?;
        self.cost.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"attack": {"epsilon": 0.5}, "vit": {"num_layers": 2}}"#).unwrap();
        assert_eq!(cfg.attack.epsilon, 0.5);
        assert_eq!(cfg.attack.k, 4);
        assert_eq!(cfg.vit.num_layers, 2);
        assert_eq!(cfg.cost, CostModel::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {}}"#).is_err());
    }
}
