//! The TOML run configuration. Every section and key is optional; missing
//! values take the defaults below, and command-line flags override both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::model::{AdapterSite, ModelConfig};
use crate::unlearn::{PretrainConfig, UnlearnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub seed: u64,
    pub entities: usize,
    pub attributes: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings { seed: 0, entities: 120, attributes: 6 }
    }
}

/// Model shape without the vocabulary size, which comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq: usize,
    pub mlp_ratio: usize,
    pub adapter_rank: usize,
    pub adapter_sites: Vec<AdapterSite>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings::from_config(&ModelConfig::new(1))
    }
}

impl ModelSettings {
    pub fn from_config(c: &ModelConfig) -> Self {
        ModelSettings {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            max_seq: c.max_seq,
            mlp_ratio: c.mlp_ratio,
            adapter_rank: c.adapter_rank,
            adapter_sites: c.adapter_sites.clone(),
        }
    }

    pub fn to_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            vocab_size,
            max_seq: self.max_seq,
            mlp_ratio: self.mlp_ratio,
            adapter_rank: self.adapter_rank,
            adapter_sites: self.adapter_sites.clone(),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Inputs and outputs of the command that wrote a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Subcommand that produced the directory; informational.
    pub command: String,
    pub corpus: CorpusSettings,
    pub model: ModelSettings,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Defaults, or the file's values when a path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
