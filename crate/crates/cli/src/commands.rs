//! One function per subcommand. Each reads its inputs, writes outputs under
//! the run directory, and prints a short human-readable summary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rem_core::channels::{fit_all_eirp, PathLossModel};
use rem_core::features::{
    build_samples, extract_sample, load_dataset, save_dataset, split_dataset, split_indices, DatasetSplit, Sample,
};
use rem_core::geo::{load_measurements, load_scenario, Measurement, Scenario};
use rem_core::neural::{train, Dragon, ModelCheckpoint, TrainConfig};
use rem_core::rem::{
    best_server, evaluate, generate_rem, predict_analytical, write_best_server_csv, write_ecdf_csv,
    write_heatmap_pgm, write_rem_csv, EvalReport, Predictor,
};
use rem_core::synth::synthesize;
use rem_core::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::{io_err, Run};

/// Samples are extracted in chunks to bound image memory.
const PREDICT_CHUNK: usize = 1024;

/// A predictor named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PredictorName {
    Model(PathLossModel),
    Dragon,
}

impl FromStr for PredictorName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dragon" {
            Ok(PredictorName::Dragon)
        } else {
            s.parse().map(PredictorName::Model).map_err(|_| {
                Error::Validation(format!(
                    "unknown predictor `{s}`; expected one of friis, two-ray, nakagami, uma-b, winner-c2, obstacle, dragon"
                ))
            })
        }
    }
}

impl fmt::Display for PredictorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorName::Model(m) => f.write_str(m.name()),
            PredictorName::Dragon => f.write_str("dragon"),
        }
    }
}

pub fn load_bundle(run: &mut Run, path: &Path) -> Result<Scenario> {
    let path = run.input(path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Scenario::from_json(&text).map_err(|e| match e {
        Error::Parse { line, field, message, .. } => Error::Parse {
            source_name: path.display().to_string(),
            line,
            field,
            message,
        },
        other => other,
    })
}

fn load_checkpoint(run: &mut Run, path: Option<&Path>) -> Result<Dragon> {
    let path = path.ok_or_else(|| {
        Error::MissingPrerequisite("the dragon predictor needs --checkpoint (produced by `rem train`)".into())
    })?;
    let path = run.input(path)?;
    Dragon::from_checkpoint(&ModelCheckpoint::load(&path)?)
}

fn predictor<'a>(name: PredictorName, cfg: &'a RunConfig, dragon: Option<&'a Dragon>) -> Result<Predictor<'a>> {
    Ok(match name {
        PredictorName::Model(model) => Predictor::Analytical {
            model,
            params: &cfg.channel,
        },
        PredictorName::Dragon => Predictor::Dragon(
            dragon.ok_or_else(|| Error::MissingPrerequisite("the dragon predictor needs --checkpoint".into()))?,
        ),
    })
}

/// RSRP predictions at measurement positions, in input order.
fn predict_measurements(s: &Scenario, p: Predictor<'_>, ms: &[Measurement]) -> Result<Vec<f64>> {
    let cell_of = |m: &Measurement| {
        s.cell(&m.cell_id)
            .ok_or_else(|| Error::Consistency(format!("unknown cell `{}`", m.cell_id)))
    };
    match p {
        Predictor::Analytical { model, params } => ms
            .par_iter()
            .map(|m| predict_analytical(s, model, params, cell_of(m)?, &m.position))
            .collect(),
        Predictor::Dragon(d) => {
            let mut out = Vec::with_capacity(ms.len());
            for chunk in ms.chunks(PREDICT_CHUNK) {
                let samples: Vec<Sample> = chunk
                    .par_iter()
                    .map(|m| extract_sample(s, cell_of(m)?, &m.position))
                    .collect::<Result<_>>()?;
                out.extend(d.predict_rsrp(&samples)?);
            }
            Ok(out)
        }
    }
}

/// Predictions in the measurement CSV layout, with `rsrp_dbm` holding the prediction.
fn write_predictions(path: &Path, s: &Scenario, ms: &[Measurement], pred: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, std::io::Error::other(e)))?;
    let to_io = |e: csv::Error| io_err(path, std::io::Error::other(e));
    w.write_record(["lat", "lon", "alt_m", "cell_id", "rsrp_dbm"]).map_err(to_io)?;
    for (m, p) in ms.iter().zip(pred) {
        let g = s.projection().unproject(&m.position);
        let ground = s.terrain_elevation(m.position.x, m.position.y)?;
        w.write_record([
            format!("{:.10}", g.lat),
            format!("{:.10}", g.lon),
            format!("{:.3}", m.position.z - ground),
            m.cell_id.clone(),
            format!("{p}"),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads the `rsrp_dbm` column of a prediction file, checking that its rows
/// line up with the measurements by cell id.
fn read_predictions(path: &Path, ms: &[Measurement]) -> Result<Vec<f64>> {
    let source = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, std::io::Error::other(e)))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            source_name: source.clone(),
            line: 1,
            field: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            source_name: source.clone(),
            line: 1,
            field: "header".into(),
            message: format!("missing column `{name}`"),
        })
    };
    let (ci, ri) = (col("cell_id")?, col("rsrp_dbm")?);
    let mut out = Vec::with_capacity(ms.len());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            source_name: source.clone(),
            line,
            field: "record".into(),
            message: e.to_string(),
        })?;
        let m = ms.get(i).ok_or_else(|| {
            Error::Consistency(format!("{source} has more rows than the {} measurements", ms.len()))
        })?;
        if rec.get(ci).map(str::trim) != Some(m.cell_id.as_str()) {
            return Err(Error::Consistency(format!(
                "{source}:{line}: cell id does not match measurement row {}",
                i + 1
            )));
        }
        let raw = rec.get(ri).unwrap_or("").trim();
        out.push(raw.parse().map_err(|_| Error::Parse {
            source_name: source.clone(),
            line,
            field: "rsrp_dbm".into(),
            message: format!("cannot parse `{raw}`"),
        })?);
    }
    if out.len() != ms.len() {
        return Err(Error::Consistency(format!(
            "{source} has {} rows for {} measurements",
            out.len(),
            ms.len()
        )));
    }
    Ok(out)
}

pub fn ingest(run: &mut Run, scenario: &Path, terrain: &Path, heights: Option<&Path>) -> Result<()> {
    let scenario = run.input(scenario)?;
    let terrain = run.input(terrain)?;
    let heights = heights.map(|h| run.input(h)).transpose()?;
    let s = load_scenario(&scenario, &terrain, heights.as_deref())?;
    run.write("bundle.json", s.to_json().as_bytes())?;
    let bb = s.bbox();
    println!(
        "ingested {} buildings and {} cells over {:.0} x {:.0} m",
        s.buildings().len(),
        s.cells().len(),
        bb.width(),
        bb.height()
    );
    Ok(())
}

pub fn fit_eirp(run: &mut Run, cfg: &RunConfig, bundle: &Path, measurements: &Path) -> Result<()> {
    let s = load_bundle(run, bundle)?;
    let ms = load_measurements(&run.input(measurements)?, &s)?;
    let (fitted, missing) = fit_all_eirp(&s, &ms, &cfg.channel)?;
    for (id, v) in &fitted {
        println!("{id}: EIRP {v:.2} dBm");
    }
    for id in &missing {
        log::warn!("cell `{id}` has no measurements; its EIRP is left unchanged");
        println!("{id}: no measurements, EIRP unchanged");
    }
    run.write("fitted_bundle.json", s.with_eirp(&fitted).to_json().as_bytes())?;
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct SynthOverrides {
    pub buildings: Option<usize>,
    pub cells: Option<usize>,
    pub sigma: Option<f64>,
    pub n_measurements: Option<usize>,
    pub width: Option<f64>,
    pub height: Option<f64>,
}

pub fn synth(run: &mut Run, cfg: &mut RunConfig, o: &SynthOverrides) -> Result<()> {
    let p = &mut cfg.synth;
    p.n_buildings = o.buildings.unwrap_or(p.n_buildings);
    p.n_cells = o.cells.unwrap_or(p.n_cells);
    p.noise_sigma_db = o.sigma.unwrap_or(p.noise_sigma_db);
    p.n_measurements = o.n_measurements.unwrap_or(p.n_measurements);
    p.width_m = o.width.unwrap_or(p.width_m);
    p.height_m = o.height.unwrap_or(p.height_m);
    let out = synthesize(p, cfg.seed)?;
    for name in ["scenario.json", "terrain.asc", "measurements.csv", "truth.csv", "synth_meta.json"] {
        run.output(name)?;
    }
    out.write(&run.dir)?;
    run.write("bundle.json", out.scenario.to_json().as_bytes())?;
    println!(
        "synthesized {} buildings, {} cells, {} measurements (sigma {} dB)",
        out.scenario.buildings().len(),
        out.scenario.cells().len(),
        out.measurements.len(),
        p.noise_sigma_db
    );
    Ok(())
}

pub fn extract(run: &mut Run, bundle: &Path, measurements: &Path) -> Result<()> {
    let s = load_bundle(run, bundle)?;
    let ms = load_measurements(&run.input(measurements)?, &s)?;
    let samples = build_samples(&s, &ms)?;
    let path = run.output("dataset.jsonl")?;
    save_dataset(&path, &samples)?;
    println!("extracted {} samples", samples.len());
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub patience: Option<usize>,
}

fn rmse_on(d: &Dragon, samples: &[Sample]) -> Result<(f64, f64)> {
    let measured: Vec<f64> = samples
        .iter()
        .map(|s| Ok(s.baseline_rsrp()? + s.target_delta_db.unwrap_or(0.0)))
        .collect::<Result<_>>()?;
    let base: Vec<f64> = samples.iter().map(Sample::baseline_rsrp).collect::<Result<_>>()?;
    Ok((
        evaluate(&d.predict_rsrp(samples)?, &measured)?.rmse_db,
        evaluate(&base, &measured)?.rmse_db,
    ))
}

pub fn train_cmd(run: &mut Run, cfg: &mut RunConfig, dataset: &Path, o: &TrainOverrides) -> Result<()> {
    let t = &mut cfg.train;
    t.max_epochs = o.epochs.unwrap_or(t.max_epochs);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = o.learning_rate.unwrap_or(t.learning_rate);
    if let Some(p) = o.patience {
        t.early_stop_patience = (p > 0).then_some(p);
    }
    t.validate()?;
    let samples = load_dataset(&run.input(dataset)?)?;
    let split = split_dataset(&samples, cfg.seed)?;
    let outcome = train(&split, &cfg.architecture, &cfg.train)?;
    let ck = run.output("checkpoint.json")?;
    outcome.checkpoint.save(&ck)?;
    run.write("history.json", serde_json::to_string_pretty(&outcome.history).expect("serializes").as_bytes())?;
    let idx = split_indices(samples.len(), cfg.seed)?;
    run.write("split.json", serde_json::to_string(&idx).expect("serializes").as_bytes())?;
    let h = &outcome.history;
    println!("trained {} epochs, best epoch {}", h.epochs_run(), h.best_epoch + 1);
    if !split.test.is_empty() {
        let dragon = Dragon::from_checkpoint(&outcome.checkpoint)?;
        let (d, b) = rmse_on(&dragon, &split.test)?;
        println!("held-out RMSE: dragon {d:.2} dB, uma-b baseline {b:.2} dB");
    }
    Ok(())
}

pub fn predict(
    run: &mut Run,
    cfg: &RunConfig,
    bundle: &Path,
    measurements: &Path,
    name: PredictorName,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let s = load_bundle(run, bundle)?;
    let ms = load_measurements(&run.input(measurements)?, &s)?;
    let dragon = match name {
        PredictorName::Dragon => Some(load_checkpoint(run, checkpoint)?),
        PredictorName::Model(_) => None,
    };
    let pred = predict_measurements(&s, predictor(name, cfg, dragon.as_ref())?, &ms)?;
    let path = run.output(&format!("predictions_{name}.csv"))?;
    write_predictions(&path, &s, &ms, &pred)?;
    println!("wrote {} predictions to {}", pred.len(), path.display());
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct RemOverrides {
    pub resolution: Option<f64>,
    pub rx_height: Option<f64>,
    pub outdoor_only: bool,
    pub cells: Vec<String>,
}

pub fn rem(
    run: &mut Run,
    cfg: &mut RunConfig,
    bundle: &Path,
    name: PredictorName,
    checkpoint: Option<&Path>,
    o: &RemOverrides,
) -> Result<()> {
    cfg.rem.resolution_m = o.resolution.unwrap_or(cfg.rem.resolution_m);
    cfg.rem.rx_height_m = o.rx_height.unwrap_or(cfg.rem.rx_height_m);
    cfg.rem.outdoor_only |= o.outdoor_only;
    let s = load_bundle(run, bundle)?;
    let dragon = match name {
        PredictorName::Dragon => Some(load_checkpoint(run, checkpoint)?),
        PredictorName::Model(_) => None,
    };
    let cells: Vec<_> = if o.cells.is_empty() {
        s.cells().iter().collect()
    } else {
        o.cells
            .iter()
            .map(|id| s.cell(id).ok_or_else(|| Error::Validation(format!("unknown cell `{id}`"))))
            .collect::<Result<_>>()?
    };
    let grid = generate_rem(&s, predictor(name, cfg, dragon.as_ref())?, &cells, &cfg.rem)?;

    let path = run.output("rem.csv")?;
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write_rem_csv(std::io::BufWriter::new(file), &grid, s.projection())?;
    for (id, layer) in &grid.layers {
        let mut buf = Vec::new();
        write_heatmap_pgm(&mut buf, layer, grid.rows, grid.cols)?;
        run.write(&format!("rem_{id}.pgm"), &buf)?;
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in &cells {
        groups.entry(c.mno.clone()).or_default().push(c.id.clone());
    }
    let best = best_server(&grid, &groups)?;
    let mut buf = Vec::new();
    write_best_server_csv(&mut buf, &grid, &best)?;
    run.write("best_server.csv", &buf)?;
    println!(
        "REM {} rows x {} cols at {} m, {} layers ({name})",
        grid.rows,
        grid.cols,
        grid.resolution_m,
        grid.layers.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            _ => Err(Error::Validation(format!("unknown subset `{s}`; expected all, train, val or test"))),
        }
    }
}

pub struct EvaluateArgs<'a> {
    pub bundle: &'a Path,
    pub measurements: &'a Path,
    pub predictors: &'a [PredictorName],
    pub checkpoint: Option<&'a Path>,
    pub predictions: &'a [PathBuf],
    pub split: Option<&'a Path>,
    pub subset: Subset,
}

fn subset_indices(run: &mut Run, split: Option<&Path>, subset: Subset, n: usize) -> Result<Option<Vec<usize>>> {
    let Some(path) = split else {
        return match subset {
            Subset::All => Ok(None),
            _ => Err(Error::MissingPrerequisite("--subset needs --split (written by `rem train`)".into())),
        };
    };
    let path = run.input(path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let split: DatasetSplit<usize> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        field: "split".into(),
        message: e.to_string(),
    })?;
    let total = split.train.len() + split.val.len() + split.test.len();
    if total != n {
        return Err(Error::Consistency(format!("split covers {total} rows, the measurement file has {n}")));
    }
    Ok(match subset {
        Subset::All => None,
        Subset::Train => Some(split.train),
        Subset::Val => Some(split.val),
        Subset::Test => Some(split.test),
    })
}

pub fn evaluate_cmd(run: &mut Run, cfg: &RunConfig, a: &EvaluateArgs<'_>) -> Result<()> {
    let s = load_bundle(run, a.bundle)?;
    let all = load_measurements(&run.input(a.measurements)?, &s)?;
    let keep = subset_indices(run, a.split, a.subset, all.len())?;
    let pick = |v: &[f64]| -> Vec<f64> {
        match &keep {
            Some(idx) => idx.iter().map(|&i| v[i]).collect(),
            None => v.to_vec(),
        }
    };
    let ms: Vec<Measurement> = match &keep {
        Some(idx) => idx.iter().map(|&i| all[i].clone()).collect(),
        None => all.clone(),
    };
    let measured: Vec<f64> = ms.iter().map(|m| m.rsrp_dbm).collect();

    let mut names: Vec<PredictorName> = a.predictors.to_vec();
    if names.is_empty() {
        names = PathLossModel::ALL.into_iter().map(PredictorName::Model).collect();
        if a.checkpoint.is_some() {
            names.push(PredictorName::Dragon);
        }
    }
    let dragon = if names.contains(&PredictorName::Dragon) {
        Some(load_checkpoint(run, a.checkpoint)?)
    } else {
        None
    };

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for &name in &names {
        let pred = predict_measurements(&s, predictor(name, cfg, dragon.as_ref())?, &ms)?;
        reports.push((name.to_string(), evaluate(&pred, &measured)?));
    }
    for path in a.predictions {
        let path = run.input(path)?;
        let pred = pick(&read_predictions(&path, &all)?);
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push((label, evaluate(&pred, &measured)?));
    }

    let mut table = String::from("predictor,n,rmse_db,mae_db,bias_db\n");
    println!("{:<16} {:>6} {:>9} {:>9} {:>9}", "predictor", "n", "rmse_db", "mae_db", "bias_db");
    for (label, r) in &reports {
        println!("{label:<16} {:>6} {:>9.2} {:>9.2} {:>9.2}", r.n, r.rmse_db, r.mae_db, r.bias_db);
        table.push_str(&format!("{label},{},{:.6},{:.6},{:.6}\n", r.n, r.rmse_db, r.mae_db, r.bias_db));
        let mut buf = Vec::new();
        write_ecdf_csv(&mut buf, r)?;
        run.write(&format!("ecdf_{label}.csv"), &buf)?;
    }
    run.write("evaluation.csv", table.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Trial {
    trial: usize,
    learning_rate: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs_run: usize,
    best_epoch: usize,
    score_mse: f64,
}

fn log_uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        return r[0];
    }
    rng.random_range(r[0].ln()..r[1].ln()).exp()
}

pub fn search(
    run: &mut Run,
    cfg: &mut RunConfig,
    dataset: &Path,
    trials: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    cfg.search.trials = trials.unwrap_or(cfg.search.trials);
    cfg.search.max_epochs = epochs.unwrap_or(cfg.search.max_epochs);
    cfg.search.validate()?;
    let samples = load_dataset(&run.input(dataset)?)?;
    let split = split_dataset(&samples, cfg.seed)?;
    // Stream 2: weights use stream 0 and shuffling stream 1 of the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut rows = Vec::new();
    let mut best: Option<(f64, TrainConfig)> = None;
    for trial in 0..cfg.search.trials {
        let tc = TrainConfig {
            learning_rate: log_uniform(&mut rng, cfg.search.learning_rate),
            weight_decay: log_uniform(&mut rng, cfg.search.weight_decay),
            batch_size: cfg.search.batch_sizes[rng.random_range(0..cfg.search.batch_sizes.len())],
            max_epochs: cfg.search.max_epochs,
            ..cfg.train.clone()
        };
        let outcome = train(&split, &cfg.architecture, &tc)?;
        let h = &outcome.history;
        let score = h.val_loss.get(h.best_epoch).or(h.train_loss.get(h.best_epoch)).copied().unwrap_or(f64::NAN);
        log::info!("trial {trial}: lr {:.2e}, wd {:.2e}, batch {} -> {score:.4}", tc.learning_rate, tc.weight_decay, tc.batch_size);
        rows.push(Trial {
            trial,
            learning_rate: tc.learning_rate,
            weight_decay: tc.weight_decay,
            batch_size: tc.batch_size,
            epochs_run: h.epochs_run(),
            best_epoch: h.best_epoch,
            score_mse: score,
        });
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, tc));
        }
    }
    let path = run.output("search.csv")?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, std::io::Error::other(e)))?;
    for r in &rows {
        w.serialize(r).map_err(|e| io_err(&path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let (score, tc) = best.expect("at least one trial");
    let best_cfg = RunConfig {
        train: tc,
        ..cfg.clone()
    };
    run.write("best_config.json", best_cfg.to_json().as_bytes())?;
    println!(
        "best of {} trials: lr {:.3e}, weight decay {:.3e}, batch {} (selection MSE {score:.4})",
        rows.len(),
        best_cfg.train.learning_rate,
        best_cfg.train.weight_decay,
        best_cfg.train.batch_size
    );
    Ok(())
}
