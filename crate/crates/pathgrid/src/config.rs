//! Run configuration, read from TOML. Every section is optional.
//!
//! ```toml
//! seed = 7
//!
//! [generation]
//! count = 2000
//! obstacle_density = 0.0
//! bounds = { min = [-3, -3, 0], max = [3, 3, 4] }
//!
//! [model]
//! embed_dim = 64
//! num_layers = 2
//! num_heads = 4
//!
//! [training]
//! epochs = 8
//! batch_size = 16
//! optimizer = { kind = { kind = "sgd" }, learning_rate = 0.3, grad_clip = 1.0 }
//!
//! [decode]
//! mode = "beam"
//! beam_width = 5
//!
//! [sim]
//! max_ticks = 512
//! ```

use std::path::Path;

use pathgrid_core::corpus::GenerationConfig;
use pathgrid_core::decoder::DecodeConfig;
use pathgrid_core::model::ModelConfig;
use pathgrid_core::taskgrid::CONTEXT_WIDTH;
use pathgrid_core::twinsim::EpisodeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Defaults to `generation.max_path_len`.
    pub max_seq_len: Option<usize>,
    pub ffn_multiplier: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_seq_len: None,
            ffn_multiplier: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generation: GenerationConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub decode: DecodeConfig,
    pub sim: EpisodeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            max_seq_len: self.model.max_seq_len.unwrap_or(self.generation.max_path_len as usize),
            task_feature_width: CONTEXT_WIDTH,
            lattice_box: self.generation.bounds,
            ffn_multiplier: self.model.ffn_multiplier,
        }
    }

    /// Check every section; commands call this before writing anything.
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.model_config().validate()?;
        self.training.validate()?;
        self.decode.validate()?;
        if self.sim.max_ticks == 0 {
            return Err(Error::Config("sim.max_ticks must be positive".into()));
        }
        Ok(())
    }
}
