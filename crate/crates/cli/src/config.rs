//! Run configuration: built-in defaults, optionally overridden by a JSON
//! file, then by command-line flags.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rem_core::channels::ChannelParams;
use rem_core::neural::{ArchitectureConfig, TrainConfig};
use rem_core::rem::RemOptions;
use rem_core::synth::SynthParams;
use rem_core::{Error, Result};

/// Hyperparameter ranges for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub trials: usize,
    /// Log-uniform range.
    pub learning_rate: [f64; 2],
    /// Log-uniform range.
    pub weight_decay: [f64; 2],
    pub batch_sizes: Vec<usize>,
    pub max_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 8,
            learning_rate: [1e-4, 3e-3],
            weight_decay: [1e-5, 1e-3],
            batch_sizes: vec![32, 64, 128],
            max_epochs: 20,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.trials == 0 || self.max_epochs == 0 {
            return Err(Error::Validation("search: trials and max_epochs must be at least 1".into()));
        }
        if !range(self.learning_rate) || !range(self.weight_decay) {
            return Err(Error::Validation("search: ranges must be positive and ordered".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Validation("search: batch_sizes must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Everything a command may read from `--config`.
///
/// `seed` drives every random choice: synthesis, splitting, initialization
/// and shuffling. The seeds inside the sections are overwritten by it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub channel: ChannelParams,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub rem: RemOptions,
    pub synth: SynthParams,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            field: "config".into(),
            message: e.to_string(),
        })
    }

    /// Propagates the run seed into the sections that carry their own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.channel.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.architecture.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.search.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Package version plus a short hash of the default configuration, so that
/// a change of defaults is visible in every manifest.
pub fn version() -> &'static str {
    static VERSION: OnceLock<String> = OnceLock::new();
    VERSION.get_or_init(|| {
        let digest = Sha256::digest(RunConfig::default().to_json().as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("{}+defaults.{hex}", env!("CARGO_PKG_VERSION"))
    })
}
