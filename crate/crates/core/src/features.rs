//! Training and inference samples: numeric features, images, baseline loss,
//! and the residual target.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{n_prb_from_bandwidth, resource_element_spread_db, LinkBudget, Link, LosMode};
use crate::error::{Error, Result};
use crate::geo::{Cell, LocalPoint, Measurement, Scenario};
use crate::imaging::{self, GrayImage, ImagePair};

pub const N_FEATURES: usize = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "delta_lon_m",
    "delta_lat_m",
    "d_3d_m",
    "n_obs",
    "d_obs_m",
    "n_ter",
    "d_ter_m",
    "bandwidth_mhz",
    "freq_mhz",
    "eirp_dbm",
];

/// The numeric inputs of the feature path, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// East-west distance between cell and receiver.
    pub delta_lon_m: f64,
    /// North-south distance between cell and receiver.
    pub delta_lat_m: f64,
    pub d_3d_m: f64,
    pub n_obs: f64,
    pub d_obs_m: f64,
    pub n_ter: f64,
    pub d_ter_m: f64,
    pub bandwidth_mhz: f64,
    pub freq_mhz: f64,
    pub eirp_dbm: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.delta_lon_m,
            self.delta_lat_m,
            self.d_3d_m,
            self.n_obs,
            self.d_obs_m,
            self.n_ter,
            self.d_ter_m,
            self.bandwidth_mhz,
            self.freq_mhz,
            self.eirp_dbm,
        ]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Result<Self> {
        let f = FeatureVector {
            delta_lon_m: a[0],
            delta_lat_m: a[1],
            d_3d_m: a[2],
            n_obs: a[3],
            d_obs_m: a[4],
            n_ter: a[5],
            d_ter_m: a[6],
            bandwidth_mhz: a[7],
            freq_mhz: a[8],
            eirp_dbm: a[9],
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("feature `{}` is not finite", FEATURE_NAMES[i])));
        }
        if let Some(i) = a[..7].iter().position(|v| *v < 0.0) {
            return Err(Error::Validation(format!("feature `{}` is negative", FEATURE_NAMES[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    pub images: ImagePair,
    /// UMa loss with geometric LOS.
    pub baseline_loss_db: f64,
    pub target_delta_db: Option<f64>,
    pub cell_id: String,
    pub position: LocalPoint,
}

impl Sample {
    /// RSRP of the baseline alone (no correction).
    pub fn baseline_rsrp(&self) -> Result<f64> {
        let n_prb = n_prb_from_bandwidth(self.features.bandwidth_mhz)?;
        Ok(LinkBudget::new(self.features.eirp_dbm, self.baseline_loss_db, 0.0, n_prb)?.rsrp())
    }

    /// RSRP with a correction applied on top of the baseline.
    pub fn corrected_rsrp(&self, delta_db: f64) -> Result<f64> {
        Ok(self.baseline_rsrp()? + delta_db)
    }

    /// The 128x64 network input: top view stacked over side view.
    pub fn image_input(&self) -> Vec<f32> {
        imaging::concat_vertical(&self.images).data
    }
}

pub fn extract_sample(s: &Scenario, cell: &Cell, rx: &LocalPoint) -> Result<Sample> {
    let eirp = cell
        .eirp_dbm
        .ok_or_else(|| Error::MissingPrerequisite(format!("cell `{}` has no fitted EIRP", cell.id)))?;
    if !s.contains_xy(rx.x, rx.y) {
        return Err(Error::OutOfBounds { x: rx.x, y: rx.y });
    }
    let link = Link::new(s, cell, rx)?;
    let p = &link.profile;
    let features = FeatureVector {
        delta_lon_m: (rx.x - cell.position.x).abs(),
        delta_lat_m: (rx.y - cell.position.y).abs(),
        d_3d_m: p.d_3d,
        n_obs: p.n_obs as f64,
        d_obs_m: p.d_obs,
        n_ter: p.n_ter as f64,
        d_ter_m: p.d_ter,
        bandwidth_mhz: cell.bandwidth_mhz,
        freq_mhz: cell.freq_mhz,
        eirp_dbm: eirp,
    };
    if let Err(e) = features.validate() {
        log::warn!("rejecting sample for cell `{}` at ({}, {}): {e}", cell.id, rx.x, rx.y);
        return Err(e);
    }
    let baseline_loss_db = link.uma_loss(LosMode::Geometric)?;
    let images = imaging::render_pair(s, rx, &cell.position)?;
    Ok(Sample {
        features,
        images,
        baseline_loss_db,
        target_delta_db: None,
        cell_id: cell.id.clone(),
        position: *rx,
    })
}

/// The correction that makes the link budget reproduce the measurement.
pub fn compute_target(sample: &Sample, m: &Measurement, cell: &Cell) -> Result<f64> {
    if m.cell_id != cell.id || sample.cell_id != cell.id {
        return Err(Error::Consistency(format!(
            "measurement cell `{}`, sample cell `{}`, cell `{}` disagree",
            m.cell_id, sample.cell_id, cell.id
        )));
    }
    let eirp = cell
        .eirp_dbm
        .ok_or_else(|| Error::MissingPrerequisite(format!("cell `{}` has no fitted EIRP", cell.id)))?;
    let spread = resource_element_spread_db(n_prb_from_bandwidth(cell.bandwidth_mhz)?);
    Ok(m.rsrp_dbm - (eirp - spread - sample.baseline_loss_db))
}

/// Extracts one labelled sample per measurement, in input order.
pub fn build_samples(s: &Scenario, measurements: &[Measurement]) -> Result<Vec<Sample>> {
    measurements
        .par_iter()
        .map(|m| {
            let cell = s
                .cell(&m.cell_id)
                .ok_or_else(|| Error::Consistency(format!("unknown cell `{}`", m.cell_id)))?;
            let mut sample = extract_sample(s, cell, &m.position)?;
            sample.target_delta_db = Some(compute_target(&sample, m, cell)?);
            Ok(sample)
        })
        .collect()
}

/// Per-feature z-score statistics from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose spread was zero; their `std` is 1.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.std.len() != n || self.degenerate.len() != n {
            return Err(Error::Validation("normalization stats need equal, non-empty mean/std/flag columns".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("normalization stats must be finite with positive std".into()));
        }
        Ok(())
    }

    pub fn apply(&self, f: &FeatureVector) -> [f64; N_FEATURES] {
        let mut a = f.to_array();
        for (i, v) in a.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
        a
    }
}

pub fn fit_normalization(train: &[Sample]) -> Result<NormStats> {
    let rows: Vec<[f64; N_FEATURES]> = train.iter().map(|s| s.features.to_array()).collect();
    fit_columns(&rows)
}

fn fit_columns(rows: &[[f64; N_FEATURES]]) -> Result<NormStats> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "normalization needs at least 2 training samples, got {}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut stats = NormStats {
        mean: vec![0.0; N_FEATURES],
        std: vec![1.0; N_FEATURES],
        degenerate: vec![false; N_FEATURES],
    };
    for j in 0..N_FEATURES {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        stats.mean[j] = mean;
        // Relative threshold: a column of identical values can pick up rounding noise.
        if std <= 1e-12 * mean.abs().max(1.0) {
            stats.degenerate[j] = true;
        } else {
            stats.std[j] = std;
        }
    }
    Ok(stats)
}

pub fn apply_normalization(sample: &Sample, stats: &NormStats) -> [f64; N_FEATURES] {
    stats.apply(&sample.features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub val: Vec<T>,
    pub seed: u64,
}

/// Index partition behind [`split_dataset`].
pub fn split_indices(n: usize, seed: u64) -> Result<DatasetSplit<usize>> {
    if n < 10 {
        return Err(Error::InsufficientData(format!("splitting needs at least 10 samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_test = n / 10;
    let val = idx.split_off(n_train + n_test);
    let test = idx.split_off(n_train);
    Ok(DatasetSplit {
        train: idx,
        test,
        val,
        seed,
    })
}

pub fn split_dataset<T: Clone>(samples: &[T], seed: u64) -> Result<DatasetSplit<T>> {
    let s = split_indices(samples.len(), seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&s.train),
        test: pick(&s.test),
        val: pick(&s.val),
        seed,
    })
}

// Dataset cache. Pixels take values in {0, 0.5, 1}; scaling by 254 keeps
// them exact through a byte.
const PIXEL_SCALE: f32 = 254.0;

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    features: Vec<f64>,
    top: String,
    side: String,
    baseline_loss_db: f64,
    target_delta_db: Option<f64>,
    cell_id: String,
    position: LocalPoint,
}

fn encode_image(img: &GrayImage) -> String {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * PIXEL_SCALE).round() as u8)
        .collect();
    B64.encode(bytes)
}

fn decode_image(text: &str) -> std::result::Result<GrayImage, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    GrayImage::from_pixels(bytes.iter().map(|b| *b as f32 / PIXEL_SCALE).collect()).map_err(|e| e.to_string())
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let rec = SampleRecord {
            features: s.features.to_array().to_vec(),
            top: encode_image(&s.images.top),
            side: encode_image(&s.images.side),
            baseline_loss_db: s.baseline_loss_db,
            target_delta_db: s.target_delta_db,
            cell_id: s.cell_id.clone(),
            position: s.position,
        };
        let line = serde_json::to_string(&rec).expect("sample records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R, source_name: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |field: &str, message: String| Error::parse(source_name, i + 1, field, message);
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| bad("record", e.to_string()))?;
        let arr: [f64; N_FEATURES] = rec
            .features
            .try_into()
            .map_err(|v: Vec<f64>| bad("features", format!("expected {N_FEATURES} values, got {}", v.len())))?;
        let features = FeatureVector::from_array(arr).map_err(|e| bad("features", e.to_string()))?;
        let images = ImagePair {
            top: decode_image(&rec.top).map_err(|e| bad("top", e))?,
            side: decode_image(&rec.side).map_err(|e| bad("side", e))?,
        };
        out.push(Sample {
            features,
            images,
            baseline_loss_db: rec.baseline_loss_db,
            target_delta_db: rec.target_delta_db,
            cell_id: rec.cell_id,
            position: rec.position,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, samples)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f), &path.display().to_string())
}
