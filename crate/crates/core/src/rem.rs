//! Radio environment maps: gridded per-cell RSRP, multi-operator best-server
//! aggregation, and error metrics against measurements.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{predict_rsrp, ChannelParams, Link, PathLossModel};
use crate::error::{Error, Result};
use crate::features::{extract_sample, Sample};
use crate::geo::{Cell, LocalPoint, Projection, Scenario, DEFAULT_RX_HEIGHT_M};
use crate::geometry::Rect;
use crate::neural::Dragon;

/// Marks grid cells without a prediction.
pub const NO_COVERAGE: f64 = f64::NAN;

pub const DEFAULT_REM_RESOLUTION_M: f64 = 10.0;

/// Heatmap scale: `HEATMAP_FLOOR_DBM` maps to black, `+HEATMAP_SPAN_DB` to white.
pub const HEATMAP_FLOOR_DBM: f64 = -140.0;
pub const HEATMAP_SPAN_DB: f64 = 80.0;

/// Samples are extracted and predicted in chunks to bound image memory.
const DRAGON_CHUNK: usize = 1024;

/// Per-cell RSRP rasters over a shared grid. Row 0 is the northern edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct REMGrid {
    pub bbox: Rect,
    pub resolution_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub rx_height_m: f64,
    /// Row-major `rows x cols` values in dBm, keyed by cell id.
    pub layers: BTreeMap<String, Vec<f64>>,
}

impl REMGrid {
    pub fn new(bbox: Rect, resolution_m: f64, rx_height_m: f64) -> Result<Self> {
        if !(resolution_m > 0.0 && resolution_m.is_finite()) {
            return Err(Error::Domain(format!("REM resolution must be positive, got {resolution_m}")));
        }
        if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
            return Err(Error::Domain("REM bounding box is empty".into()));
        }
        if !(rx_height_m > 0.0 && rx_height_m.is_finite()) {
            return Err(Error::Domain(format!("receiver height must be positive, got {rx_height_m}")));
        }
        Ok(REMGrid {
            bbox,
            resolution_m,
            rows: grid_count(bbox.height(), resolution_m),
            cols: grid_count(bbox.width(), resolution_m),
            rx_height_m,
            layers: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of a grid cell, clamped into the bbox for partial edge cells.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (self.bbox.x_min + (col as f64 + 0.5) * self.resolution_m).min(self.bbox.x_max);
        let y = (self.bbox.y_max - (row as f64 + 0.5) * self.resolution_m).max(self.bbox.y_min);
        (x, y)
    }

    /// All centers in row-major order.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.cell_center(r, c))
            .collect()
    }

    pub fn layer(&self, cell_id: &str) -> Option<&[f64]> {
        self.layers.get(cell_id).map(|v| v.as_slice())
    }

    pub fn insert_layer(&mut self, cell_id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let cell_id = cell_id.into();
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "layer `{cell_id}` has {} values, the grid has {}",
                values.len(),
                self.len()
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::Validation(format!("layer `{cell_id}` contains infinite values")));
        }
        self.layers.insert(cell_id, values);
        Ok(())
    }
}

fn grid_count(extent: f64, resolution: f64) -> usize {
    // Tolerate float noise so that an exact multiple does not gain a sliver row.
    let q = extent / resolution;
    let r = q.round();
    if (q - r).abs() < 1e-9 * q.max(1.0) {
        r as usize
    } else {
        q.ceil() as usize
    }
}

/// Where RSRP predictions come from.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// An analytical path-loss model with no correction.
    Analytical {
        model: PathLossModel,
        params: &'a ChannelParams,
    },
    /// The UMa baseline plus the learned correction.
    Dragon(&'a Dragon),
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Analytical { model, .. } => model.name(),
            Predictor::Dragon(_) => "dragon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemOptions {
    pub resolution_m: f64,
    pub rx_height_m: f64,
    /// Leave grid cells whose center lies inside a building without coverage.
    pub outdoor_only: bool,
}

impl Default for RemOptions {
    fn default() -> Self {
        RemOptions {
            resolution_m: DEFAULT_REM_RESOLUTION_M,
            rx_height_m: DEFAULT_RX_HEIGHT_M,
            outdoor_only: false,
        }
    }
}

fn require_eirp(cell: &Cell) -> Result<()> {
    match cell.eirp_dbm {
        Some(_) => Ok(()),
        None => Err(Error::MissingPrerequisite(format!(
            "cell `{}` has no fitted EIRP; run fit-eirp first",
            cell.id
        ))),
    }
}

/// RSRP from one analytical model at `rx`.
pub fn predict_analytical(
    s: &Scenario,
    model: PathLossModel,
    params: &ChannelParams,
    cell: &Cell,
    rx: &LocalPoint,
) -> Result<f64> {
    require_eirp(cell)?;
    let link = Link::new(s, cell, rx)?;
    predict_rsrp(cell, model.loss(&link, params)?, 0.0)
}

/// RSRP prediction at a single receiver position.
pub fn predict_point(s: &Scenario, predictor: Predictor<'_>, cell: &Cell, rx: &LocalPoint) -> Result<f64> {
    match predictor {
        Predictor::Analytical { model, params } => predict_analytical(s, model, params, cell, rx),
        Predictor::Dragon(d) => {
            let sample = extract_sample(s, cell, rx)?;
            Ok(d.predict_rsrp(std::slice::from_ref(&sample))?[0])
        }
    }
}

/// Fills one layer of `grid` for `cell`. Centers outside the scenario, or
/// inside buildings when `outdoor_only` is set, get [`NO_COVERAGE`].
pub fn generate_layer(
    s: &Scenario,
    predictor: Predictor<'_>,
    cell: &Cell,
    grid: &REMGrid,
    outdoor_only: bool,
) -> Result<Vec<f64>> {
    require_eirp(cell)?;
    let points: Vec<Option<LocalPoint>> = grid
        .centers()
        .into_par_iter()
        .map(|(x, y)| {
            if !s.contains_xy(x, y) || (outdoor_only && s.inside_any_building(x, y)) {
                return Ok(None);
            }
            s.above_ground(x, y, grid.rx_height_m).map(Some)
        })
        .collect::<Result<_>>()?;
    match predictor {
        Predictor::Analytical { model, params } => points
            .par_iter()
            .map(|p| match p {
                Some(rx) => predict_analytical(s, model, params, cell, rx),
                None => Ok(NO_COVERAGE),
            })
            .collect(),
        Predictor::Dragon(d) => {
            let mut out = vec![NO_COVERAGE; points.len()];
            let covered: Vec<usize> = (0..points.len()).filter(|&i| points[i].is_some()).collect();
            for chunk in covered.chunks(DRAGON_CHUNK) {
                let samples: Vec<Sample> = chunk
                    .par_iter()
                    .map(|&i| extract_sample(s, cell, points[i].as_ref().expect("covered point")))
                    .collect::<Result<_>>()?;
                for (&i, v) in chunk.iter().zip(d.predict_rsrp(&samples)?) {
                    out[i] = v;
                }
            }
            Ok(out)
        }
    }
}

/// A REM over the scenario bbox with one layer per listed cell.
pub fn generate_rem(s: &Scenario, predictor: Predictor<'_>, cells: &[&Cell], opts: &RemOptions) -> Result<REMGrid> {
    let mut grid = REMGrid::new(s.bbox(), opts.resolution_m, opts.rx_height_m)?;
    for cell in cells {
        let layer = generate_layer(s, predictor, cell, &grid, opts.outdoor_only)?;
        grid.insert_layer(cell.id.clone(), layer)?;
    }
    Ok(grid)
}

/// Best-server aggregation across operators.
#[derive(Debug, Clone, PartialEq)]
pub struct BestServer {
    /// Per operator: the strongest of its cells, per grid cell.
    pub mno_max: BTreeMap<String, Vec<f64>>,
    /// Per operator: the cell achieving `mno_max`, `None` without coverage.
    pub mno_serving: BTreeMap<String, Vec<Option<String>>>,
    /// Strongest operator per grid cell.
    pub best_mno: Vec<Option<String>>,
    /// Serving cell of the strongest operator.
    pub best_cell: Vec<Option<String>>,
}

/// Whether `(v, id)` outranks `(bv, bid)`: stronger RSRP, then smaller cell id.
fn outranks(v: f64, id: &str, bv: f64, bid: &str) -> bool {
    v > bv || (v == bv && id < bid)
}

/// Strongest covered candidate.
fn argmax<'a, K: Copy>(candidates: impl Iterator<Item = (K, &'a str, f64)>) -> Option<(K, &'a str, f64)> {
    candidates.filter(|c| !c.2.is_nan()).fold(None, |best, c| match best {
        Some(b) if !outranks(c.2, c.1, b.2, b.1) => Some(b),
        _ => Some(c),
    })
}

/// Operator groups of a scenario, cell ids sorted.
pub fn mno_groups(s: &Scenario) -> BTreeMap<String, Vec<String>> {
    s.cells_by_mno()
        .into_iter()
        .map(|(m, cells)| {
            let mut ids: Vec<String> = cells.iter().map(|c| c.id.clone()).collect();
            ids.sort();
            (m.to_string(), ids)
        })
        .collect()
}

pub fn best_server(rem: &REMGrid, groups: &BTreeMap<String, Vec<String>>) -> Result<BestServer> {
    if groups.is_empty() {
        return Err(Error::Domain("best-server aggregation needs at least one operator".into()));
    }
    let n = rem.len();
    let mut layers: BTreeMap<&str, Vec<(&str, &[f64])>> = BTreeMap::new();
    for (mno, ids) in groups {
        if ids.is_empty() {
            return Err(Error::Domain(format!("operator `{mno}` has no cells")));
        }
        let mut v = Vec::new();
        for id in ids {
            let layer = rem
                .layer(id)
                .ok_or_else(|| Error::Consistency(format!("REM has no layer for cell `{id}` of operator `{mno}`")))?;
            v.push((id.as_str(), layer));
        }
        layers.insert(mno.as_str(), v);
    }
    let mut out = BestServer {
        mno_max: BTreeMap::new(),
        mno_serving: BTreeMap::new(),
        best_mno: Vec::with_capacity(n),
        best_cell: Vec::with_capacity(n),
    };
    for (mno, ls) in &layers {
        let (mut max, mut serving) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            match argmax(ls.iter().map(|(id, l)| ((), *id, l[i]))) {
                Some((_, id, v)) => {
                    max.push(v);
                    serving.push(Some(id.to_string()));
                }
                None => {
                    max.push(NO_COVERAGE);
                    serving.push(None);
                }
            }
        }
        out.mno_max.insert(mno.to_string(), max);
        out.mno_serving.insert(mno.to_string(), serving);
    }
    for i in 0..n {
        let best = argmax(
            out.mno_serving
                .iter()
                .filter_map(|(mno, serving)| serving[i].as_deref().map(|cell| (mno, cell, out.mno_max[mno][i]))),
        );
        out.best_mno.push(best.map(|(m, _, _)| m.clone()));
        out.best_cell.push(best.map(|(_, c, _)| c.to_string()));
    }
    Ok(out)
}

/// Prediction error statistics; errors are prediction minus measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_db: f64,
    pub mae_db: f64,
    pub bias_db: f64,
    /// Absolute errors, ascending.
    pub abs_error_ecdf: Vec<f64>,
    pub n: usize,
}

impl EvalReport {
    /// `(abs_error, cumulative probability)` steps of the empirical CDF.
    pub fn ecdf_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.n as f64;
        self.abs_error_ecdf.iter().enumerate().map(move |(i, e)| (*e, (i + 1) as f64 / n))
    }
}

pub fn evaluate(predictions: &[f64], measurements: &[f64]) -> Result<EvalReport> {
    if predictions.len() != measurements.len() {
        return Err(Error::Consistency(format!(
            "{} predictions for {} measurements",
            predictions.len(),
            measurements.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InsufficientData("evaluation needs at least one prediction".into()));
    }
    let errors: Vec<f64> = predictions.iter().zip(measurements).map(|(p, m)| p - m).collect();
    if let Some(i) = errors.iter().position(|e| !e.is_finite()) {
        return Err(Error::Validation(format!("pair {i} has a non-finite error")));
    }
    let n = errors.len() as f64;
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let mae_db = abs.iter().sum::<f64>() / n;
    let rmse_db = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let bias_db = errors.iter().sum::<f64>() / n;
    abs.sort_by(f64::total_cmp);
    Ok(EvalReport {
        rmse_db,
        mae_db,
        bias_db,
        abs_error_ecdf: abs,
        n: errors.len(),
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::io("csv output", std::io::Error::other(e))
}

fn fmt_value(v: f64, decimals: usize) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.decimals$}")
    }
}

/// CSV with `x_m,y_m,lat,lon` of each center and one `rsrp_<cell_id>` column per layer.
pub fn write_rem_csv<W: Write>(w: W, rem: &REMGrid, proj: &Projection) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["x_m".to_string(), "y_m".into(), "lat".into(), "lon".into()];
    header.extend(rem.layers.keys().map(|id| format!("rsrp_{id}")));
    out.write_record(&header).map_err(csv_error)?;
    for (i, (x, y)) in rem.centers().into_iter().enumerate() {
        let g = proj.unproject(&LocalPoint::new(x, y, 0.0));
        let mut rec = vec![format!("{x:.3}"), format!("{y:.3}"), format!("{:.8}", g.lat), format!("{:.8}", g.lon)];
        rec.extend(rem.layers.values().map(|l| fmt_value(l[i], 3)));
        out.write_record(&rec).map_err(csv_error)?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))
}

/// Grey level of an RSRP value; no coverage is black.
pub fn heatmap_intensity(rsrp_dbm: f64) -> u8 {
    if rsrp_dbm.is_nan() {
        return 0;
    }
    (((rsrp_dbm - HEATMAP_FLOOR_DBM) / HEATMAP_SPAN_DB).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM of one raster, north up.
pub fn write_heatmap_pgm<W: Write>(mut w: W, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} heatmap", values.len())));
    }
    let io = |e| Error::io("pgm output", e);
    write!(
        w,
        "P5\n# intensity = round(clamp((rsrp_dbm + {}) / {}, 0, 1) * 255); no coverage = 0\n{cols} {rows}\n255\n",
        -HEATMAP_FLOOR_DBM, HEATMAP_SPAN_DB
    )
    .map_err(io)?;
    let bytes: Vec<u8> = values.iter().map(|v| heatmap_intensity(*v)).collect();
    w.write_all(&bytes).map_err(io)
}

/// Two-column empirical CDF of absolute errors.
pub fn write_ecdf_csv<W: Write>(w: W, report: &EvalReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["abs_error_db", "cum_probability"]).map_err(csv_error)?;
    for (e, p) in report.ecdf_points() {
        out.write_record([format!("{e:.6}"), format!("{p:.6}")]).map_err(csv_error)?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))
}

/// Best-server map as CSV: strongest operator and cell per grid center, then
/// each operator's best RSRP.
pub fn write_best_server_csv<W: Write>(w: W, rem: &REMGrid, best: &BestServer) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["x_m".to_string(), "y_m".into(), "best_mno".into(), "best_cell".into()];
    header.extend(best.mno_max.keys().map(|m| format!("rsrp_{m}")));
    out.write_record(&header).map_err(csv_error)?;
    for (i, (x, y)) in rem.centers().into_iter().enumerate() {
        let mut rec = vec![
            format!("{x:.3}"),
            format!("{y:.3}"),
            best.best_mno[i].clone().unwrap_or_default(),
            best.best_cell[i].clone().unwrap_or_default(),
        ];
        rec.extend(best.mno_max.values().map(|l| fmt_value(l[i], 3)));
        out.write_record(&rec).map_err(csv_error)?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))
}
