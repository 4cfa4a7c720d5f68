//! Geographic ingestion: projection into a local metric frame, terrain and
//! building models, cell sites, measurements, and the immutable [`Scenario`].

mod heights;
mod io;
mod projection;
mod terrain;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use heights::{calibrate_heights, DEFAULT_BUILDING_HEIGHT_M};
pub use io::{
    build_scenario, load_measurements, load_scenario, parse_measurements, write_measurements, BBoxRecord,
    BuildingRecord, CellRecord, ScenarioFile, DEFAULT_RX_HEIGHT_M,
};
pub use projection::{Projection, EARTH_RADIUS_M};
pub use terrain::{AsciiGrid, HeightRaster, Resample, TerrainGrid, DEFAULT_TERRAIN_CELL_M};

use crate::error::{Error, Result};
use crate::geometry::{self, Rect};

/// Tolerance for "inside the bounding box" checks, in meters.
const BBOX_TOL_M: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub alt_m: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, alt_m: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || !alt_m.is_finite() {
            return Err(Error::Domain(format!("invalid geodetic point ({lat}, {lon}, {alt_m})")));
        }
        Ok(GeoPoint { lat, lon, alt_m })
    }
}

/// Point in the local frame: x east, y north, z above sea level (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LocalPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        LocalPoint { x, y, z }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist_2d(&self, other: &LocalPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_3d(&self, other: &LocalPoint) -> f64 {
        let d2 = self.dist_2d(other);
        d2.hypot(self.z - other.z)
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> LocalPoint {
        LocalPoint::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightSource {
    Annotated,
    Calibrated,
    Default,
}

/// Vertical prism: a simple counter-clockwise footprint extruded from `base_m` by `height_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BuildingRepr")]
pub struct Building {
    pub id: String,
    pub footprint: Vec<LocalPoint>,
    pub height_m: f64,
    pub height_source: HeightSource,
    /// Terrain elevation at the footprint centroid.
    pub base_m: f64,
    #[serde(skip)]
    ring: Vec<[f64; 2]>,
    #[serde(skip)]
    bounds: Option<Rect>,
}

impl Building {
    /// Validates the footprint, dropping a closing duplicate vertex and
    /// reorienting clockwise rings.
    pub fn new(
        id: impl Into<String>,
        footprint: Vec<LocalPoint>,
        height_m: f64,
        height_source: HeightSource,
        base_m: f64,
    ) -> Result<Self> {
        let id = id.into();
        let mut footprint = footprint;
        if footprint.len() > 1 && footprint.first().map(|p| p.xy()) == footprint.last().map(|p| p.xy()) {
            footprint.pop();
        }
        if footprint.len() < 3 {
            return Err(Error::Validation(format!(
                "building `{id}`: footprint needs at least 3 vertices, got {}",
                footprint.len()
            )));
        }
        if !footprint.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::Validation(format!("building `{id}`: non-finite vertex")));
        }
        if !(height_m > 0.0 && height_m.is_finite()) {
            return Err(Error::Validation(format!("building `{id}`: height must be positive, got {height_m}")));
        }
        if !base_m.is_finite() {
            return Err(Error::Validation(format!("building `{id}`: non-finite base elevation")));
        }
        let mut ring: Vec<[f64; 2]> = footprint.iter().map(|p| p.xy()).collect();
        if !geometry::is_simple(&ring) {
            return Err(Error::Validation(format!("building `{id}`: footprint is not a simple polygon")));
        }
        if geometry::signed_area(&ring) < 0.0 {
            footprint.reverse();
            ring.reverse();
        }
        for p in footprint.iter_mut() {
            p.z = 0.0;
        }
        let bounds = Rect::from_points(ring.iter().copied());
        Ok(Building {
            id,
            footprint,
            height_m,
            height_source,
            base_m,
            ring,
            bounds,
        })
    }

    fn restore_cache(&mut self) {
        self.ring = self.footprint.iter().map(|p| p.xy()).collect();
        self.bounds = Rect::from_points(self.ring.iter().copied());
    }

    pub fn ring(&self) -> &[[f64; 2]] {
        &self.ring
    }

    pub fn bounds(&self) -> Rect {
        self.bounds.expect("building bounds are computed at construction")
    }

    pub fn top_m(&self) -> f64 {
        self.base_m + self.height_m
    }

    pub fn centroid(&self) -> [f64; 2] {
        geometry::centroid(&self.ring)
    }

    /// Relative containment tolerance scaled by footprint size.
    pub fn containment_tol(&self) -> f64 {
        let b = self.bounds();
        1e-9 * b.width().max(b.height()).max(1.0)
    }

    /// Strict interior test in plan view; the boundary counts as outside.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let b = self.bounds();
        if x < b.x_min || x > b.x_max || y < b.y_min || y > b.y_max {
            return false;
        }
        geometry::point_in_polygon([x, y], &self.ring, self.containment_tol()) == geometry::Containment::Inside
    }

    pub fn prism_contains(&self, p: &LocalPoint) -> bool {
        p.z >= self.base_m && p.z <= self.top_m() && self.footprint_contains(p.x, p.y)
    }

    pub fn with_height(&self, height_m: f64, source: HeightSource) -> Building {
        let mut b = self.clone();
        b.height_m = height_m;
        b.height_source = source;
        b
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Building {
        let mut b = self.clone();
        for p in b.footprint.iter_mut() {
            p.x += dx;
            p.y += dy;
        }
        b.base_m += dz;
        b.restore_cache();
        b
    }

    /// Rigid rotation in plan view by `angle` radians about `(cx, cy)`.
    pub fn rotated(&self, cx: f64, cy: f64, angle: f64) -> Building {
        let (s, c) = angle.sin_cos();
        let mut b = self.clone();
        for p in b.footprint.iter_mut() {
            let (dx, dy) = (p.x - cx, p.y - cy);
            p.x = cx + c * dx - s * dy;
            p.y = cy + s * dx + c * dy;
        }
        b.restore_cache();
        b
    }
}

#[derive(Deserialize)]
struct BuildingRepr {
    id: String,
    footprint: Vec<LocalPoint>,
    height_m: f64,
    height_source: HeightSource,
    base_m: f64,
}

impl TryFrom<BuildingRepr> for Building {
    type Error = Error;

    fn try_from(r: BuildingRepr) -> Result<Self> {
        Building::new(r.id, r.footprint, r.height_m, r.height_source, r.base_m)
    }
}

pub const LTE_BANDWIDTHS_MHZ: [f64; 6] = [1.4, 3.0, 5.0, 10.0, 15.0, 20.0];

/// LTE cell site. `position.z` is the antenna elevation above sea level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub mno: String,
    pub position: LocalPoint,
    pub antenna_height_m: f64,
    pub freq_mhz: f64,
    pub bandwidth_mhz: f64,
    pub eirp_dbm: Option<f64>,
}

impl Cell {
    pub fn validate(&self) -> Result<()> {
        if !(self.freq_mhz > 0.0 && self.freq_mhz.is_finite()) {
            return Err(Error::Validation(format!("cell `{}`: freq_mhz must be positive", self.id)));
        }
        if !LTE_BANDWIDTHS_MHZ.contains(&self.bandwidth_mhz) {
            return Err(Error::Validation(format!(
                "cell `{}`: unsupported LTE bandwidth {} MHz",
                self.id, self.bandwidth_mhz
            )));
        }
        if !(self.antenna_height_m > 0.0) || !self.position.is_finite() {
            return Err(Error::Validation(format!("cell `{}`: invalid antenna placement", self.id)));
        }
        Ok(())
    }

    /// Antenna height above local ground.
    pub fn ground_m(&self) -> f64 {
        self.position.z - self.antenna_height_m
    }
}

pub const RSRP_PLAUSIBLE_DBM: (f64, f64) = (-160.0, -30.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub position: LocalPoint,
    pub cell_id: String,
    pub rsrp_dbm: f64,
}

impl Measurement {
    pub fn new(position: LocalPoint, cell_id: impl Into<String>, rsrp_dbm: f64) -> Result<Self> {
        let (lo, hi) = RSRP_PLAUSIBLE_DBM;
        if !(rsrp_dbm >= lo && rsrp_dbm <= hi) {
            return Err(Error::Validation(format!(
                "RSRP {rsrp_dbm} dBm outside plausible range [{lo}, {hi}]"
            )));
        }
        Ok(Measurement {
            position,
            cell_id: cell_id.into(),
            rsrp_dbm,
        })
    }
}

/// The propagation environment. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    projection: Projection,
    bbox: Rect,
    buildings: Vec<Building>,
    terrain: TerrainGrid,
    cells: Vec<Cell>,
}

impl Scenario {
    pub fn new(
        projection: Projection,
        bbox: Rect,
        buildings: Vec<Building>,
        terrain: TerrainGrid,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
            return Err(Error::Validation("scenario bounding box is empty".into()));
        }
        for b in &buildings {
            if let Some(p) = b.footprint.iter().find(|p| !bbox.contains(p.x, p.y, BBOX_TOL_M)) {
                return Err(Error::Validation(format!(
                    "building `{}` has vertex ({:.2}, {:.2}) outside the scenario bounding box",
                    b.id, p.x, p.y
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &cells {
            c.validate()?;
            if !bbox.contains(c.position.x, c.position.y, BBOX_TOL_M) {
                return Err(Error::Validation(format!("cell `{}` lies outside the scenario bounding box", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Validation(format!("duplicate cell id `{}`", c.id)));
            }
        }
        let ext = terrain.interpolable_extent();
        if !(ext.contains(bbox.x_min, bbox.y_min, BBOX_TOL_M) && ext.contains(bbox.x_max, bbox.y_max, BBOX_TOL_M)) {
            return Err(Error::Validation(
                "terrain grid does not cover the scenario bounding box (extend it by at least half a cell)".into(),
            ));
        }
        Ok(Scenario {
            projection,
            bbox,
            buildings,
            terrain,
            cells,
        })
    }

    /// Parses a bundle written by [`Scenario::to_json`], re-validating every invariant.
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)
            .map_err(|e| Error::parse("scenario bundle", e.line(), "bundle", e.to_string()))?;
        Scenario::new(s.projection, s.bbox, s.buildings, s.terrain, s.cells)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn terrain(&self) -> &TerrainGrid {
        &self.terrain
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn cells_by_mno(&self) -> BTreeMap<&str, Vec<&Cell>> {
        let mut map: BTreeMap<&str, Vec<&Cell>> = BTreeMap::new();
        for c in &self.cells {
            map.entry(c.mno.as_str()).or_default().push(c);
        }
        map
    }

    pub fn terrain_elevation(&self, x: f64, y: f64) -> Result<f64> {
        self.terrain.elevation_at(x, y)
    }

    /// Point `height_m` above the terrain at `(x, y)`.
    pub fn above_ground(&self, x: f64, y: f64, height_m: f64) -> Result<LocalPoint> {
        Ok(LocalPoint::new(x, y, self.terrain_elevation(x, y)? + height_m))
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        self.bbox.contains(x, y, BBOX_TOL_M)
    }

    pub fn inside_any_building(&self, x: f64, y: f64) -> bool {
        self.buildings.iter().any(|b| b.footprint_contains(x, y))
    }

    /// Copy with cell EIRPs replaced where `eirp` has an entry.
    pub fn with_eirp(&self, eirp: &BTreeMap<String, f64>) -> Scenario {
        let mut s = self.clone();
        for c in s.cells.iter_mut() {
            if let Some(&v) = eirp.get(&c.id) {
                c.eirp_dbm = Some(v);
            }
        }
        s
    }

    pub fn with_buildings(&self, buildings: Vec<Building>) -> Result<Scenario> {
        Scenario::new(self.projection, self.bbox, buildings, self.terrain.clone(), self.cells.clone())
    }

    pub fn with_cells(&self, cells: Vec<Cell>) -> Result<Scenario> {
        Scenario::new(self.projection, self.bbox, self.buildings.clone(), self.terrain.clone(), cells)
    }

    /// Rigid translation of everything, including terrain and the bounding box.
    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Scenario {
        let mut terrain = self.terrain.translated(dx, dy);
        for v in terrain.elevation.iter_mut() {
            *v += dz;
        }
        Scenario {
            projection: self.projection,
            bbox: self.bbox.translated(dx, dy),
            buildings: self.buildings.iter().map(|b| b.translated(dx, dy, dz)).collect(),
            terrain,
            cells: self
                .cells
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.position = c.position.translated(dx, dy, dz);
                    c
                })
                .collect(),
        }
    }

    /// Plan-view rotation of the buildings about `(cx, cy)`. Terrain and bbox are kept,
    /// so this is only meaningful for flat terrain.
    pub fn with_buildings_rotated(&self, cx: f64, cy: f64, angle: f64) -> Scenario {
        let mut s = self.clone();
        s.buildings = self.buildings.iter().map(|b| b.rotated(cx, cy, angle)).collect();
        s
    }
}
