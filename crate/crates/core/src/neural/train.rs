use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, TrainMeta};
use super::model::{ArchitectureConfig, Model};
use super::optim::{Adam, AdamConfig};
use super::Tensor;
use crate::error::{Error, Result};
use crate::features::{fit_normalization, DatasetSplit, NormStats, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            batch_size: 128,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            max_epochs: 100,
            early_stop_patience: Some(10),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == Some(0) {
            return Err(Error::Validation(
                "batch_size, max_epochs and early_stop_patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Network-ready arrays: images `[N, image_len]`, normalized features
/// `[N, n_features]`, targets `[N]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub images: Vec<f32>,
    pub features: Vec<f32>,
    pub targets: Vec<f32>,
    pub image_len: usize,
    pub n_features: usize,
}

impl TrainingSet {
    pub fn from_samples(samples: &[Sample], norm: &NormStats) -> Result<Self> {
        let mut set = Self::inputs(samples, norm);
        for s in samples {
            let t = s
                .target_delta_db
                .ok_or_else(|| Error::MissingPrerequisite(format!("sample for cell `{}` has no target", s.cell_id)))?;
            set.targets.push(t as f32);
        }
        Ok(set)
    }

    /// Inputs only; targets stay empty.
    pub fn inputs(samples: &[Sample], norm: &NormStats) -> Self {
        let mut set = TrainingSet::default();
        for s in samples {
            let img = s.image_input();
            set.image_len = img.len();
            set.images.extend(img);
            let f = norm.apply(&s.features);
            set.n_features = f.len();
            set.features.extend(f.iter().map(|v| *v as f32));
        }
        set
    }

    pub fn len(&self) -> usize {
        self.features.len().checked_div(self.n_features).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers rows into network input tensors.
    pub fn batch(&self, idx: &[usize], arch: &ArchitectureConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.image_len != arch.image_len() || self.n_features != arch.input_features {
            return Err(Error::Shape(format!(
                "data has {} pixels and {} features per sample; the architecture expects {} and {}",
                self.image_len,
                self.n_features,
                arch.image_len(),
                arch.input_features
            )));
        }
        let mut img = Vec::with_capacity(idx.len() * self.image_len);
        let mut feat = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            img.extend_from_slice(&self.images[i * self.image_len..(i + 1) * self.image_len]);
            feat.extend_from_slice(&self.features[i * self.n_features..(i + 1) * self.n_features]);
        }
        let [c, h, w] = arch.input_image;
        Ok((
            Tensor::new(vec![idx.len(), c, h, w], img)?,
            Tensor::new(vec![idx.len(), self.n_features], feat)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// One entry per epoch run; empty when there is no validation data.
    pub val_loss: Vec<f64>,
    /// Zero-based epoch of the returned weights.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

const EVAL_CHUNK: usize = 256;

/// Inference-mode predictions in dB for every row of `data`.
pub fn predict_set(model: &Model<f32>, data: &TrainingSet) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (img, feat) = data.batch(chunk, model.architecture())?;
        out.extend_from_slice(model.infer(img, feat)?.data());
    }
    Ok(out)
}

pub fn mse(pred: &[f32], target: &[f32]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| (*p as f64 - *t as f64).powi(2)).sum::<f64>() / n
}

/// Mean and population standard deviation of the targets, for the output map.
fn target_affine(targets: &[f32]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = targets.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (if std > 1e-6 { std } else { 1.0 }, mean)
}

/// Runs the epoch loop and leaves `model` holding the best weights seen.
///
/// Selection uses validation loss when `val` is non-empty, else training loss.
pub fn fit(model: &mut Model<f32>, train: &TrainingSet, val: &TrainingSet, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let n = train.len();
    // A trailing batch of one sample has no batch statistics and is skipped.
    let usable = if n % cfg.batch_size == 1 { n - 1 } else { n };
    if usable < 2 {
        return Err(Error::InsufficientData(format!("training needs at least 2 samples, got {n}")));
    }
    let arch = model.architecture().clone();
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..n).collect();
    // Stream 0 of the seed initializes the weights; shuffling uses stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        let diverged = |message: String| Error::Training { epoch, message };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order[..usable].chunks(cfg.batch_size) {
            let (img, feat) = train.batch(batch, &arch)?;
            let out = model.forward(img, feat, true).map_err(|e| diverged(e.to_string()))?;
            let b = batch.len();
            let mut grad = Vec::with_capacity(b);
            let mut loss = 0.0f64;
            for (p, &i) in out.data().iter().zip(batch) {
                let r = *p - train.targets[i];
                loss += (r as f64).powi(2);
                grad.push(2.0 * r / b as f32);
            }
            if !loss.is_finite() {
                return Err(diverged("training loss is not finite".into()));
            }
            total += loss;
            model.zero_grad();
            model
                .backward(Tensor::new(vec![b, 1], grad)?)
                .map_err(|e| diverged(e.to_string()))?;
            adam.step(model.params_mut().into_iter().map(|(_, p)| p));
        }
        let train_loss = total / usable as f64;
        history.train_loss.push(train_loss);
        let score = if val.is_empty() {
            train_loss
        } else {
            let v = mse(&predict_set(model, val).map_err(|e| diverged(e.to_string()))?, &val.targets);
            history.val_loss.push(v);
            v
        };
        log::info!(
            "epoch {:>3}: train mse {train_loss:.4}{}",
            epoch + 1,
            history.val_loss.last().map(|v| format!(", val mse {v:.4}")).unwrap_or_default()
        );
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
}

/// Trains on `split.train`, selects on `split.val`; `split.test` is not read.
pub fn train(split: &DatasetSplit<Sample>, arch: &ArchitectureConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let norm = fit_normalization(&split.train)?;
    let train_set = TrainingSet::from_samples(&split.train, &norm)?;
    let val_set = TrainingSet::from_samples(&split.val, &norm)?;
    let mut model = Model::<f32>::new(arch.clone(), cfg.seed)?;
    let (scale, shift) = target_affine(&train_set.targets);
    model.set_output_affine(scale, shift);
    let history = fit(&mut model, &train_set, &val_set, cfg)?;
    let meta = TrainMeta {
        seed: cfg.seed,
        epochs_run: history.epochs_run(),
        best_epoch: history.best_epoch,
        final_train_loss: history.train_loss.last().copied().unwrap_or(f64::NAN),
        final_val_loss: history.val_loss.last().copied(),
        n_train: train_set.len(),
        n_val: val_set.len(),
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::from_model(&mut model, norm, meta),
        history,
    })
}
