use std::fs;
use std::path::Path;

use dpssm_core::degrade::{standard_recipes, ClassRecipe};
use dpssm_core::extractor::{ExtractorConfig, ProbeExperimentConfig};
use dpssm_core::losses::LossConfig;
use dpssm_core::restoration::RestorationConfig;
use dpssm_core::toy::{OverfitConfig, Toy1dConfig};
use dpssm_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub recipes: Vec<ClassRecipe>,
    /// Samples to generate; defaults to one per (input image, recipe).
    pub count: Option<usize>,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            recipes: standard_recipes(),
            count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub image_size: usize,
    pub clean_images: usize,
    pub per_class: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            clean_images: 4,
            per_class: 2,
        }
    }
}

/// Everything a subcommand may need. Every section is optional in the JSON
/// document; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub restoration: RestorationConfig,
    pub extractor: ExtractorConfig,
    pub loss: LossConfig,
    pub degrade: DegradeConfig,
    pub stats: StatsConfig,
    pub toy: Toy1dConfig,
    pub overfit: OverfitConfig,
    pub probe: ProbeExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            restoration: RestorationConfig::default(),
            extractor: ExtractorConfig::default(),
            loss: LossConfig::default(),
            degrade: DegradeConfig::default(),
            stats: StatsConfig::default(),
            toy: Toy1dConfig::default(),
            overfit: OverfitConfig::default(),
            probe: ProbeExperimentConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.restoration.validate().map_err(config_err)?;
        self.loss.validate().map_err(config_err)?;
        self.toy.validate().map_err(config_err)?;
        if self.degrade.recipes.is_empty() {
            return Err(config_err("degrade.recipes is empty"));
        }
        if self.restoration.in_channels != self.extractor.in_channels {
            return Err(config_err(format!(
                "restoration takes {} channels but the extractor takes {}",
                self.restoration.in_channels, self.extractor.in_channels
            )));
        }
        if self.restoration.embed_dim != self.extractor.embed_dim {
            return Err(config_err(format!(
                "restoration expects {}-dim embeddings but the extractor emits {}",
                self.restoration.embed_dim, self.extractor.embed_dim
            )));
        }
        Ok(())
    }
}
