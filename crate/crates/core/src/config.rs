//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::PromptTemplateConfig;
use crate::model::ModelConfig;
use crate::pipeline::EvalOptions;
use crate::trainer::{DatasetRef, TrainConfig};

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    #[serde(flatten)]
    pub templates: PromptTemplateConfig,
    /// Fixture file mapping prompts to responses.
    pub fixture: Option<PathBuf>,
    pub live: Option<LiveClientConfig>,
    /// Knowledge base file written by `build-kb` and read by `train`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub targets: Vec<DatasetRef>,
    #[serde(flatten)]
    pub options: EvalOptions,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kb: KbConfig,
    pub eval: EvalConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(aux) = &mut self.train.auxiliary {
            resolve(base, &mut aux.root);
        }
        for t in &mut self.eval.targets {
            resolve(base, &mut t.root);
        }
        for p in [&mut self.kb.fixture, &mut self.kb.path, &mut self.eval.out_dir].into_iter().flatten() {
            resolve(base, p);
        }
        if let crate::model::Backbone::Weights { vision_dir, text_dir } = &mut self.model.backbone {
            resolve(base, vision_dir);
            resolve(base, text_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.kb.templates.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn partial_file() {
        let cfg = RunConfig::from_toml_str(
            r#"
seed = 3
[train]
epochs = 2
loss_weights = { alpha = 0.0, beta = 1.0, gamma = 1.0 }
[train.auxiliary]
root = "aux"
[model]
sigma = 2.0
tau = 0.07
[model.backbone]
kind = "random"
seed = 5
vision = { image_side = 32, patch_size = 4, width = 16, layers = 4, heads = 4, output_dim = 16, stage_layers = [1, 2, 3, 4], mean = [0.5, 0.5, 0.5], std = [0.5, 0.5, 0.5], init_std = 0.02 }
text = { vocab_size = 4096, token_dim = 16, context = 77, layers = 2, heads = 2, output_dim = 16, init_std = 0.02 }
[kb]
n_class_descriptions = 3
[eval]
image_auc = "pooled"
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.kb.templates.n_class_descriptions, 3);
        assert_eq!(cfg.kb.templates.m_image_descriptions, 1);
        assert_eq!(cfg.eval.options.image_auc, crate::pipeline::ImageAucMode::Pooled);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[train]\nepochs = 0"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::from_toml_str("seed = \"x\""), Err(Error::InvalidConfig(_))));
    }
}
