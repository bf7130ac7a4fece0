use std::path::Path;

use serde::{Deserialize, Serialize};
use vinter::corpus::CorpusConfig;
use vinter::eval::DecodeConfig;
use vinter::model::{ModelConfig, Variant};
use vinter::train::TrainConfig;

use crate::CliError;

/// How the corpus is divided into training and evaluation scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            eval_fraction: 0.1,
            split_seed: 0,
        }
    }
}

/// Architecture settings; feature width and vocabulary size come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub max_regions: usize,
    pub max_target_len: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(0, Variant::Full);
        Self {
            variant: desk.variant,
            hidden: desk.hidden,
            heads: desk.heads,
            encoder_blocks: desk.encoder_blocks,
            decoder_blocks: desk.decoder_blocks,
            max_regions: desk.max_regions,
            max_target_len: desk.max_target_len,
            init_std: desk.init_std,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            feature_dim,
            max_regions: self.max_regions,
            vocab_size,
            max_target_len: self.max_target_len,
            variant: self.variant,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Every setting of a run: built-in defaults, overridden by the config
/// file, overridden by command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
