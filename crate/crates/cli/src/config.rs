use std::path::Path;

use serde::{Deserialize, Serialize};
use svar::eval::StudyConfig;
use svar::spectral::SpectralConfig;
use svar::two_stage::TwoStageConfig;
use svar::var::DEFAULT_BURN_IN;

use crate::error::{CliError, CliResult};

/// Settings for every command in one JSON document. Missing sections take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub two_stage: TwoStageConfig,
    /// Nonparametric estimate used by `psc`.
    pub spectral: SpectralConfig,
    pub simulate: SimulateSettings,
    pub bench: BenchSettings,
    pub psc: PscSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub t_len: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            t_len: 100,
            burn_in: DEFAULT_BURN_IN,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub preset: Option<String>,
    pub study: Option<StudyConfig>,
    pub replications: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PscSettings {
    /// Frequencies on `(0, pi]` when only a model is given.
    pub n_freq: usize,
}

impl Default for PscSettings {
    fn default() -> Self {
        Self { n_freq: 256 }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}
