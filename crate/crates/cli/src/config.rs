//! Run configuration: defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use workflow_predictor::encoder::EncoderConfig;
use workflow_predictor::predictor::{HeadConfig, TrainConfig};
use workflow_predictor::pretrain::PretrainConfig;
use workflow_predictor::search::Scope;
use workflow_predictor::synth::SynthConfig;
use workflow_predictor::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub k: usize,
    pub trials: usize,
    pub scope: Scope,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            k: 10,
            trials: 5,
            scope: Scope::Pooled,
        }
    }
}

/// Every tunable of every command. Sections a command does not use are
/// carried along unchanged so one file can drive a whole pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub search: SearchSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The single run seed feeds every component's substreams.
    pub fn set_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
    }
}

/// 2 for usage and configuration problems, 3 for bad input data, 4 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::DataAt { .. } | Error::Cycle { .. } | Error::Json(_) | Error::Io { .. } => 3,
        Error::Shape(_) => 4,
    }
}
