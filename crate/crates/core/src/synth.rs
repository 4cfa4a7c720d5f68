//! Synthetic cities with known ground truth, for end-to-end testing.
//!
//! Buildings are random rectangular prisms. The true received power is the
//! UMa baseline plus the obstacle-shadowing excess, so the learnable
//! correction is exactly that excess and the best achievable RMSE equals the
//! injected measurement noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channels::{
    n_prb_from_bandwidth, shadowing_excess, Link, LinkBudget, LosMode,
    ShadowingCoefficients,
};
use crate::error::{Error, Result};
use crate::geo::{
    build_scenario, write_measurements, AsciiGrid, BBoxRecord, BuildingRecord, CellRecord, LocalPoint, Measurement,
    Projection, Scenario, ScenarioFile, RSRP_PLAUSIBLE_DBM,
};

/// Carrier and bandwidth assigned to cells in turn.
const BANDS: [(f64, f64); 3] = [(2600.0, 20.0), (1800.0, 10.0), (800.0, 10.0)];
const MNOS: [&str; 3] = ["mno_a", "mno_b", "mno_c"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub center_lat: f64,
    pub center_lon: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub n_buildings: usize,
    /// Range of each rectangle side.
    pub building_side_m: [f64; 2],
    pub building_height_m: [f64; 2],
    /// Minimum clearance between buildings, cells and the bbox edge.
    pub min_gap_m: f64,
    pub n_cells: usize,
    pub antenna_height_m: f64,
    pub eirp_dbm: [f64; 2],
    pub n_measurements: usize,
    pub noise_sigma_db: f64,
    pub rx_height_m: f64,
    /// Receivers closer than this to their cell are redrawn.
    pub min_link_distance_m: f64,
    pub terrain_cell_m: f64,
    /// Terrain extends this far beyond the bbox on every side.
    pub terrain_margin_m: f64,
    /// Amplitude of a smooth sinusoidal relief; zero gives flat terrain.
    pub terrain_relief_m: f64,
    pub shadowing_beta_db_per_wall: f64,
    pub shadowing_gamma_db_per_m: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        let sh = ShadowingCoefficients::default();
        SynthParams {
            center_lat: 50.0,
            center_lon: 7.0,
            width_m: 1000.0,
            height_m: 1000.0,
            n_buildings: 50,
            building_side_m: [15.0, 50.0],
            building_height_m: [8.0, 40.0],
            min_gap_m: 5.0,
            n_cells: 2,
            antenna_height_m: 25.0,
            eirp_dbm: [55.0, 62.0],
            n_measurements: 5000,
            noise_sigma_db: 2.0,
            rx_height_m: 1.5,
            min_link_distance_m: 20.0,
            terrain_cell_m: 25.0,
            terrain_margin_m: 100.0,
            terrain_relief_m: 0.0,
            shadowing_beta_db_per_wall: sh.beta_db_per_wall,
            shadowing_gamma_db_per_m: sh.gamma_db_per_m,
        }
    }
}

fn range_ok(r: [f64; 2], min: f64) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("synth: {m}")));
        if !(self.width_m > 0.0 && self.height_m > 0.0 && self.width_m.is_finite() && self.height_m.is_finite()) {
            return bad("width_m and height_m must be positive");
        }
        if !(self.center_lat.abs() < 80.0 && self.center_lon.abs() <= 180.0) {
            return bad("center must be a valid coordinate below 80 degrees latitude");
        }
        if !range_ok(self.building_side_m, 1.0) || !range_ok(self.building_height_m, 0.1) {
            return bad("building size ranges must be ordered and positive");
        }
        if !range_ok(self.eirp_dbm, -50.0) {
            return bad("eirp_dbm range must be ordered");
        }
        if self.n_cells == 0 {
            return bad("at least one cell is required");
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return bad("noise_sigma_db must be non-negative");
        }
        if !(self.antenna_height_m > self.rx_height_m && self.rx_height_m > 0.0) {
            return bad("heights must satisfy antenna_height_m > rx_height_m > 0");
        }
        if !(self.min_gap_m >= 0.0 && self.min_link_distance_m >= 0.0) {
            return bad("clearances must be non-negative");
        }
        if !(self.terrain_cell_m > 0.0 && self.terrain_margin_m >= self.terrain_cell_m) {
            return bad("terrain_margin_m must be at least one terrain cell");
        }
        if !(self.terrain_relief_m >= 0.0) {
            return bad("terrain_relief_m must be non-negative");
        }
        if self.shadowing_beta_db_per_wall < 0.0 || self.shadowing_gamma_db_per_m < 0.0 {
            return bad("shadowing coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn shadowing(&self) -> ShadowingCoefficients {
        ShadowingCoefficients {
            beta_db_per_wall: self.shadowing_beta_db_per_wall,
            gamma_db_per_m: self.shadowing_gamma_db_per_m,
        }
    }

    fn relief(&self, x: f64, y: f64) -> f64 {
        let k = std::f64::consts::TAU / self.width_m.max(self.height_m);
        self.terrain_relief_m * (k * x).sin() * (k * y).cos()
    }
}

/// A generated scenario with noisy measurements and the noiseless truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub params: SynthParams,
    pub seed: u64,
    pub scenario_file: ScenarioFile,
    pub terrain: AsciiGrid,
    /// The scenario as reloaded from the files above.
    pub scenario: Scenario,
    pub measurements: Vec<Measurement>,
    /// Same positions and cells as `measurements`, without noise.
    pub truth: Vec<Measurement>,
    /// The correction that maps the UMa baseline onto the truth, per measurement.
    pub true_delta_db: Vec<f64>,
    pub true_eirp_dbm: BTreeMap<String, f64>,
}

/// File locations written by [`SynthOutput::write`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub scenario: PathBuf,
    pub terrain: PathBuf,
    pub measurements: PathBuf,
    pub truth: PathBuf,
    pub meta: PathBuf,
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    seed: u64,
    params: &'a SynthParams,
    true_eirp_dbm: &'a BTreeMap<String, f64>,
}

impl SynthOutput {
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths {
            scenario: dir.join("scenario.json"),
            terrain: dir.join("terrain.asc"),
            measurements: dir.join("measurements.csv"),
            truth: dir.join("truth.csv"),
            meta: dir.join("synth_meta.json"),
        };
        let put = |p: &Path, bytes: &[u8]| std::fs::write(p, bytes).map_err(|e| Error::io(p, e));
        put(&paths.scenario, self.scenario_file.to_json().as_bytes())?;
        put(&paths.terrain, self.terrain.to_ascii().as_bytes())?;
        for (path, ms) in [(&paths.measurements, &self.measurements), (&paths.truth, &self.truth)] {
            let mut buf = Vec::new();
            write_measurements(&mut buf, ms, &self.scenario)?;
            put(path, &buf)?;
        }
        let meta = SynthMeta {
            seed: self.seed,
            params: &self.params,
            true_eirp_dbm: &self.true_eirp_dbm,
        };
        put(&paths.meta, serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())?;
        Ok(paths)
    }
}

/// Axis-free rectangle: center, half sides, rotation.
struct Footprint {
    cx: f64,
    cy: f64,
    radius: f64,
    corners: Vec<[f64; 2]>,
}

fn random_footprint(p: &SynthParams, rng: &mut ChaCha8Rng) -> Footprint {
    let a = rng.random_range(p.building_side_m[0]..=p.building_side_m[1]) / 2.0;
    let b = rng.random_range(p.building_side_m[0]..=p.building_side_m[1]) / 2.0;
    let theta = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
    let radius = a.hypot(b);
    let (hw, hh) = (p.width_m / 2.0, p.height_m / 2.0);
    let lim_x = (hw - radius - p.min_gap_m).max(0.0);
    let lim_y = (hh - radius - p.min_gap_m).max(0.0);
    let cx = rng.random_range(-lim_x..=lim_x);
    let cy = rng.random_range(-lim_y..=lim_y);
    let (s, c) = theta.sin_cos();
    let corners = [(-a, -b), (a, -b), (a, b), (-a, b)]
        .iter()
        .map(|(u, v)| [cx + u * c - v * s, cy + u * s + v * c])
        .collect();
    Footprint { cx, cy, radius, corners }
}

fn fits_inside(f: &Footprint, p: &SynthParams) -> bool {
    f.cx.abs() + f.radius + p.min_gap_m <= p.width_m / 2.0 && f.cy.abs() + f.radius + p.min_gap_m <= p.height_m / 2.0
}

/// Consecutive rejected placements before giving up.
const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Generates a scenario, writes nothing. Deterministic in `(params, seed)`.
pub fn synthesize(params: &SynthParams, seed: u64) -> Result<SynthOutput> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Projection::centered(p.center_lat, p.center_lon);
    let (hw, hh) = (p.width_m / 2.0, p.height_m / 2.0);

    // Cells first, in the central half of the area, so buildings can avoid them.
    let mut cells = Vec::with_capacity(p.n_cells);
    for i in 0..p.n_cells {
        let x = rng.random_range(-hw / 2.0..=hw / 2.0);
        let y = rng.random_range(-hh / 2.0..=hh / 2.0);
        let eirp = rng.random_range(p.eirp_dbm[0]..=p.eirp_dbm[1]);
        let (freq, bw) = BANDS[i % BANDS.len()];
        cells.push((format!("cell{i}"), MNOS[i % MNOS.len()], x, y, freq, bw, eirp));
    }

    let mut footprints: Vec<Footprint> = Vec::with_capacity(p.n_buildings);
    let mut failures = 0;
    while footprints.len() < p.n_buildings {
        if failures >= MAX_PLACEMENT_TRIES {
            return Err(Error::Validation(format!(
                "synth: could only place {} of {} buildings; enlarge the area or shrink them",
                footprints.len(),
                p.n_buildings
            )));
        }
        let f = random_footprint(p, &mut rng);
        let clear_of_buildings = footprints
            .iter()
            .all(|o| (f.cx - o.cx).hypot(f.cy - o.cy) >= f.radius + o.radius + p.min_gap_m);
        let clear_of_cells = cells
            .iter()
            .all(|c| (f.cx - c.2).hypot(f.cy - c.3) >= f.radius + p.min_gap_m);
        if fits_inside(&f, p) && clear_of_buildings && clear_of_cells {
            footprints.push(f);
            failures = 0;
        } else {
            failures += 1;
        }
    }

    let geo_of = |x: f64, y: f64| {
        let g = proj.unproject(&LocalPoint::new(x, y, 0.0));
        [g.lat, g.lon]
    };
    let [lat_min, lon_min] = geo_of(-hw, -hh);
    let [lat_max, lon_max] = geo_of(hw, hh);
    let scenario_file = ScenarioFile {
        bbox: BBoxRecord {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        },
        buildings: footprints
            .iter()
            .enumerate()
            .map(|(i, f)| BuildingRecord {
                id: format!("b{i}"),
                outline: f.corners.iter().map(|c| geo_of(c[0], c[1])).collect(),
                height_m: Some(rng.random_range(p.building_height_m[0]..=p.building_height_m[1])),
            })
            .collect(),
        cells: cells
            .iter()
            .map(|(id, mno, x, y, freq, bw, _)| {
                let [lat, lon] = geo_of(*x, *y);
                CellRecord {
                    id: id.clone(),
                    mno: mno.to_string(),
                    lat,
                    lon,
                    antenna_height_m: p.antenna_height_m,
                    freq_mhz: *freq,
                    bandwidth_mhz: *bw,
                    eirp_dbm: None,
                }
            })
            .collect(),
    };

    let terrain = terrain_grid(p, &proj);
    let scenario = build_scenario(&scenario_file, &terrain, None)?;
    let true_eirp_dbm: BTreeMap<String, f64> = cells.iter().map(|c| (c.0.clone(), c.6)).collect();

    let noise = Normal::new(0.0, p.noise_sigma_db).map_err(|e| Error::Validation(format!("synth: {e}")))?;
    let bb = scenario.bbox();
    let mut measurements = Vec::with_capacity(p.n_measurements);
    let mut truth = Vec::with_capacity(p.n_measurements);
    let mut true_delta_db = Vec::with_capacity(p.n_measurements);
    let mut redraws = 0usize;
    while measurements.len() < p.n_measurements {
        if redraws > 1000 + 100 * p.n_measurements {
            return Err(Error::Validation(
                "synth: too few receiver positions yield plausible RSRP; adjust EIRP or area".into(),
            ));
        }
        let x = rng.random_range(bb.x_min..=bb.x_max);
        let y = rng.random_range(bb.y_min..=bb.y_max);
        let cell = &scenario.cells()[rng.random_range(0..scenario.cells().len())];
        let eps = noise.sample(&mut rng);
        if scenario.inside_any_building(x, y) || (x - cell.position.x).hypot(y - cell.position.y) < p.min_link_distance_m {
            redraws += 1;
            continue;
        }
        let rx = scenario.above_ground(x, y, p.rx_height_m)?;
        let link = Link::new(&scenario, cell, &rx)?;
        let delta = -shadowing_excess(&link.profile, p.shadowing());
        let n_prb = n_prb_from_bandwidth(cell.bandwidth_mhz)?;
        let clean = LinkBudget::new(true_eirp_dbm[&cell.id], link.uma_loss(LosMode::Geometric)?, delta, n_prb)?.rsrp();
        let noisy = clean + eps;
        let (lo, hi) = RSRP_PLAUSIBLE_DBM;
        if !(lo..=hi).contains(&clean) || !(lo..=hi).contains(&noisy) {
            redraws += 1;
            continue;
        }
        measurements.push(Measurement::new(rx, cell.id.clone(), noisy)?);
        truth.push(Measurement::new(rx, cell.id.clone(), clean)?);
        true_delta_db.push(delta);
    }
    if redraws > 0 {
        log::info!("synth: redrew {redraws} receiver positions");
    }

    Ok(SynthOutput {
        params: p.clone(),
        seed,
        scenario_file,
        terrain,
        scenario,
        measurements,
        truth,
        true_delta_db,
        true_eirp_dbm,
    })
}

/// Terrain raster in degrees, covering the area plus the margin.
fn terrain_grid(p: &SynthParams, proj: &Projection) -> AsciiGrid {
    let cellsize = p.terrain_cell_m / proj.m_per_deg_lat;
    let x0 = -p.width_m / 2.0 - p.terrain_margin_m;
    let y0 = -p.height_m / 2.0 - p.terrain_margin_m;
    let sw = proj.unproject(&LocalPoint::new(x0, y0, 0.0));
    let cell_x_m = cellsize * proj.m_per_deg_lon;
    let ncols = ((p.width_m + 2.0 * p.terrain_margin_m) / cell_x_m).ceil() as usize + 1;
    let nrows = ((p.height_m + 2.0 * p.terrain_margin_m) / p.terrain_cell_m).ceil() as usize + 1;
    let mut values = Vec::with_capacity(nrows * ncols);
    for r in 0..nrows {
        // First data row is the northernmost.
        let y = y0 + (nrows - 1 - r) as f64 * p.terrain_cell_m + p.terrain_cell_m / 2.0;
        for c in 0..ncols {
            let x = x0 + (c as f64 + 0.5) * cell_x_m;
            values.push(p.relief(x, y));
        }
    }
    AsciiGrid {
        ncols,
        nrows,
        xllcorner: sw.lon,
        yllcorner: sw.lat,
        cellsize,
        nodata: Some(-9999.0),
        values,
    }
}
