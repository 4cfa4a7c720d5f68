use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::model::{ArchitectureConfig, Model};
use super::train::{predict_set, TrainingSet};
use crate::error::{Error, Result};
use crate::features::{NormStats, Sample};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
}

/// Serialized model: architecture, normalization, and named little-endian
/// `f32` arrays in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub architecture: ArchitectureConfig,
    pub norm_stats: NormStats,
    pub train_meta: TrainMeta,
    pub weights: BTreeMap<String, String>,
}

fn encode(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(name: &str, text: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("array `{name}` is not a whole number of f32 values")));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl ModelCheckpoint {
    pub fn from_model(model: &mut Model<f32>, norm_stats: NormStats, train_meta: TrainMeta) -> Self {
        let architecture = model.architecture().clone();
        let weights = model.state_mut().into_iter().map(|(k, v)| (k, encode(v))).collect();
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            architecture,
            norm_stats,
            train_meta,
            weights,
        }
    }

    /// Rebuilds the model, requiring every array to be present with the exact size.
    pub fn to_model(&self) -> Result<Model<f32>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.architecture
            .validate()
            .map_err(|e| Error::Checkpoint(format!("architecture header rejected: {e}")))?;
        self.norm_stats
            .validate()
            .map_err(|e| Error::Checkpoint(format!("normalization stats rejected: {e}")))?;
        if self.norm_stats.mean.len() != self.architecture.input_features {
            return Err(Error::Checkpoint("normalization width does not match input_features".into()));
        }
        let mut model = Model::<f32>::new(self.architecture.clone(), 0)?;
        let mut seen = 0;
        for (name, dst) in model.state_mut() {
            let text = self
                .weights
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            let v = decode(&name, text)?;
            if v.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has {} values, the architecture needs {}",
                    v.len(),
                    dst.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("array `{name}` contains non-finite values")));
            }
            *dst = v;
            seen += 1;
        }
        if seen != self.weights.len() {
            let extra: Vec<&String> = self.weights.keys().filter(|k| !model_has(&mut model, k)).collect();
            return Err(Error::Checkpoint(format!("unexpected arrays {extra:?}")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates; a checkpoint that cannot produce a model is an error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_json(&text)?;
        ck.to_model()?;
        Ok(ck)
    }
}

fn model_has(model: &mut Model<f32>, name: &str) -> bool {
    model.state_mut().iter().any(|(k, _)| k == name)
}

/// A trained correction model ready for inference.
#[derive(Debug, Clone)]
pub struct Dragon {
    model: Model<f32>,
    norm: NormStats,
}

impl Dragon {
    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        Ok(Dragon {
            model: ck.to_model()?,
            norm: ck.norm_stats.clone(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Predicted correction in dB for each sample.
    pub fn predict_delta(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let set = TrainingSet::inputs(samples, &self.norm);
        Ok(predict_set(&self.model, &set)?.into_iter().map(f64::from).collect())
    }

    /// Baseline plus predicted correction, in dBm.
    pub fn predict_rsrp(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let delta = self.predict_delta(samples)?;
        samples.iter().zip(delta).map(|(s, d)| s.corrected_rsrp(d)).collect()
    }
}
