//! File formats: scenario JSON, ESRI ASCII rasters, measurement CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    calibrate_heights, AsciiGrid, Building, Cell, GeoPoint, HeightSource, LocalPoint, Measurement, Projection,
    Scenario, DEFAULT_BUILDING_HEIGHT_M,
};
use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Receiver height above ground when a measurement carries no altitude.
pub const DEFAULT_RX_HEIGHT_M: f64 = 1.5;

const MEASUREMENT_HEADER: [&str; 5] = ["lat", "lon", "alt_m", "cell_id", "rsrp_dbm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBoxRecord {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub id: String,
    /// `[lat, lon]` pairs.
    pub outline: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub mno: String,
    pub lat: f64,
    pub lon: f64,
    pub antenna_height_m: f64,
    pub freq_mhz: f64,
    pub bandwidth_mhz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eirp_dbm: Option<f64>,
}

/// On-disk scenario description in geodetic coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub bbox: BBoxRecord,
    pub buildings: Vec<BuildingRecord>,
    pub cells: Vec<CellRecord>,
}

impl ScenarioFile {
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let field = match e.classify() {
                serde_json::error::Category::Data => "schema",
                serde_json::error::Category::Syntax | serde_json::error::Category::Eof => "syntax",
                serde_json::error::Category::Io => "io",
            };
            Error::parse(source_name, e.line(), field, format!("{e}"))
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario file serializes")
    }

    /// Inverse of [`build_scenario`]: heights are written only where they were annotated,
    /// so reloading with the same rasters reproduces the scenario.
    pub fn from_scenario(s: &Scenario) -> ScenarioFile {
        let proj = s.projection();
        let bb = s.bbox();
        let sw = proj.unproject(&LocalPoint::new(bb.x_min, bb.y_min, 0.0));
        let ne = proj.unproject(&LocalPoint::new(bb.x_max, bb.y_max, 0.0));
        ScenarioFile {
            bbox: BBoxRecord {
                lat_min: sw.lat,
                lat_max: ne.lat,
                lon_min: sw.lon,
                lon_max: ne.lon,
            },
            buildings: s
                .buildings()
                .iter()
                .map(|b| BuildingRecord {
                    id: b.id.clone(),
                    outline: b
                        .footprint
                        .iter()
                        .map(|p| {
                            let g = proj.unproject(p);
                            [g.lat, g.lon]
                        })
                        .collect(),
                    height_m: (b.height_source == HeightSource::Annotated).then_some(b.height_m),
                })
                .collect(),
            cells: s
                .cells()
                .iter()
                .map(|c| {
                    let g = proj.unproject(&c.position);
                    CellRecord {
                        id: c.id.clone(),
                        mno: c.mno.clone(),
                        lat: g.lat,
                        lon: g.lon,
                        antenna_height_m: c.antenna_height_m,
                        freq_mhz: c.freq_mhz,
                        bandwidth_mhz: c.bandwidth_mhz,
                        eirp_dbm: c.eirp_dbm,
                    }
                })
                .collect(),
        }
    }
}

fn geo(lat: f64, lon: f64, what: &str) -> Result<GeoPoint> {
    GeoPoint::new(lat, lon, 0.0).map_err(|_| Error::Validation(format!("{what}: invalid coordinate ({lat}, {lon})")))
}

/// Builds a validated scenario from parsed inputs. The local frame is centered on the bounding box.
pub fn build_scenario(file: &ScenarioFile, terrain: &AsciiGrid, heights: Option<&AsciiGrid>) -> Result<Scenario> {
    let bb = &file.bbox;
    if !(bb.lat_min < bb.lat_max && bb.lon_min < bb.lon_max) {
        return Err(Error::Validation("bbox: min must be below max".into()));
    }
    geo(bb.lat_min, bb.lon_min, "bbox")?;
    geo(bb.lat_max, bb.lon_max, "bbox")?;
    let proj = Projection::centered(0.5 * (bb.lat_min + bb.lat_max), 0.5 * (bb.lon_min + bb.lon_max));
    let sw = proj.project(&geo(bb.lat_min, bb.lon_min, "bbox")?);
    let ne = proj.project(&geo(bb.lat_max, bb.lon_max, "bbox")?);
    let bbox = Rect::new(sw.x, sw.y, ne.x, ne.y);
    let terrain = terrain.to_terrain(&proj)?;
    let raster = heights.map(|h| h.to_height_raster(&proj)).transpose()?;

    let mut buildings = Vec::with_capacity(file.buildings.len());
    for rec in &file.buildings {
        let mut footprint = Vec::with_capacity(rec.outline.len());
        for &[lat, lon] in &rec.outline {
            let p = proj.project(&geo(lat, lon, &format!("building `{}`", rec.id))?);
            if !bbox.contains(p.x, p.y, 1e-6) {
                return Err(Error::Validation(format!(
                    "building `{}` has vertex ({lat}, {lon}) outside the scenario bounding box",
                    rec.id
                )));
            }
            footprint.push(p);
        }
        let (height, source) = match rec.height_m {
            Some(h) if h > 0.0 => (h, HeightSource::Annotated),
            Some(h) => {
                return Err(Error::Validation(format!("building `{}`: height must be positive, got {h}", rec.id)))
            }
            None => (DEFAULT_BUILDING_HEIGHT_M, HeightSource::Default),
        };
        // Base elevation needs the centroid, which needs a valid footprint first.
        let probe = Building::new(rec.id.clone(), footprint, height, source, 0.0)?;
        let [cx, cy] = probe.centroid();
        let base = terrain.elevation_at(cx, cy)?;
        buildings.push(Building::new(probe.id, probe.footprint, height, source, base)?);
    }
    let buildings = calibrate_heights(&buildings, raster.as_ref());

    let mut cells = Vec::with_capacity(file.cells.len());
    for rec in &file.cells {
        let p = proj.project(&geo(rec.lat, rec.lon, &format!("cell `{}`", rec.id))?);
        if !bbox.contains(p.x, p.y, 1e-6) {
            return Err(Error::Validation(format!("cell `{}` lies outside the scenario bounding box", rec.id)));
        }
        let ground = terrain.elevation_at(p.x, p.y)?;
        cells.push(Cell {
            id: rec.id.clone(),
            mno: rec.mno.clone(),
            position: LocalPoint::new(p.x, p.y, ground + rec.antenna_height_m),
            antenna_height_m: rec.antenna_height_m,
            freq_mhz: rec.freq_mhz,
            bandwidth_mhz: rec.bandwidth_mhz,
            eirp_dbm: rec.eirp_dbm,
        });
    }
    Scenario::new(proj, bbox, buildings, terrain, cells)
}

pub fn load_scenario(scenario_path: &Path, terrain_path: &Path, height_raster_path: Option<&Path>) -> Result<Scenario> {
    let file = ScenarioFile::read(scenario_path)?;
    let terrain = AsciiGrid::read(terrain_path)?;
    let heights = height_raster_path.map(AsciiGrid::read).transpose()?;
    build_scenario(&file, &terrain, heights.as_ref())
}

fn csv_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, source: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse()
        .map_err(|_| Error::parse(source, line, MEASUREMENT_HEADER[idx], format!("cannot parse `{raw}`")))
}

/// Parses a measurement CSV. Altitudes are above ground and resolved to sea level via the terrain.
pub fn parse_measurements<R: std::io::Read>(reader: R, source_name: &str, scenario: &Scenario) -> Result<Vec<Measurement>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(source_name, 1, "header", e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != MEASUREMENT_HEADER {
        return Err(Error::parse(
            source_name,
            1,
            "header",
            format!("expected `{}`, found `{}`", MEASUREMENT_HEADER.join(","), names.join(",")),
        ));
    }
    let proj = scenario.projection();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(source_name, line, "record", e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let lat: f64 = csv_field(&rec, 0, source_name, line)?;
        let lon: f64 = csv_field(&rec, 1, source_name, line)?;
        let alt = rec.get(2).unwrap_or("").trim();
        let alt_m = if alt.is_empty() {
            DEFAULT_RX_HEIGHT_M
        } else {
            csv_field(&rec, 2, source_name, line)?
        };
        let cell_id = rec.get(3).unwrap_or("").trim().to_string();
        let rsrp: f64 = csv_field(&rec, 4, source_name, line)?;
        let g = GeoPoint::new(lat, lon, alt_m)
            .map_err(|e| Error::parse(source_name, line, "lat/lon", e.to_string()))?;
        let p = proj.project(&g);
        if !scenario.contains_xy(p.x, p.y) {
            return Err(Error::parse(source_name, line, "lat/lon", "position outside the scenario bounding box"));
        }
        if scenario.cell(&cell_id).is_none() {
            return Err(Error::parse(source_name, line, "cell_id", format!("unknown cell `{cell_id}`")));
        }
        let ground = scenario
            .terrain_elevation(p.x, p.y)
            .map_err(|e| Error::parse(source_name, line, "lat/lon", e.to_string()))?;
        let m = Measurement::new(LocalPoint::new(p.x, p.y, ground + alt_m), cell_id, rsrp)
            .map_err(|e| Error::parse(source_name, line, "rsrp_dbm", e.to_string()))?;
        out.push(m);
    }
    Ok(out)
}

pub fn load_measurements(path: &Path, scenario: &Scenario) -> Result<Vec<Measurement>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_measurements(std::io::BufReader::new(file), &path.display().to_string(), scenario)
}

/// Writes measurements in the CSV format read by [`parse_measurements`].
pub fn write_measurements<W: std::io::Write>(writer: W, measurements: &[Measurement], scenario: &Scenario) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| Error::io("<measurements>", std::io::Error::other(e));
    w.write_record(MEASUREMENT_HEADER).map_err(to_io)?;
    for m in measurements {
        let g = scenario.projection().unproject(&m.position);
        let ground = scenario.terrain_elevation(m.position.x, m.position.y)?;
        w.write_record([
            format!("{:.10}", g.lat),
            format!("{:.10}", g.lon),
            format!("{:.3}", m.position.z - ground),
            m.cell_id.clone(),
            format!("{}", m.rsrp_dbm),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io("<measurements>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_terrain() -> AsciiGrid {
        AsciiGrid {
            ncols: 12,
            nrows: 12,
            xllcorner: 6.999,
            yllcorner: 50.999,
            cellsize: 0.0003,
            nodata: Some(-9999.0),
            values: vec![100.0; 144],
        }
    }

    const MINIMAL: &str = r#"{
        "bbox": {"lat_min": 51.0, "lat_max": 51.001, "lon_min": 7.0, "lon_max": 7.0015},
        "buildings": [{"id": "b1", "outline": [[51.0002, 7.0002], [51.0002, 7.0006], [51.0006, 7.0004]]}],
        "cells": [{"id": "c1", "mno": "A", "lat": 51.0008, "lon": 7.001, "antenna_height_m": 25,
                   "freq_mhz": 2600, "bandwidth_mhz": 20}]
    }"#;

    #[test]
    fn minimal_scenario_loads() {
        let file = ScenarioFile::from_json_str(MINIMAL, "s.json").unwrap();
        let s = build_scenario(&file, &flat_terrain(), None).unwrap();
        assert_eq!(s.buildings().len(), 1);
        let b = &s.buildings()[0];
        assert_eq!(b.height_source, HeightSource::Default);
        assert_eq!(b.height_m, DEFAULT_BUILDING_HEIGHT_M);
        assert!((b.base_m - 100.0).abs() < 1e-9);
        assert!((s.cells()[0].position.z - 125.0).abs() < 1e-9);
    }

    #[test]
    fn two_vertex_footprint_rejected() {
        let text = MINIMAL.replace("[[51.0002, 7.0002], [51.0002, 7.0006], [51.0006, 7.0004]]", "[[51.0002, 7.0002], [51.0002, 7.0006]]");
        let file = ScenarioFile::from_json_str(&text, "s.json").unwrap();
        assert!(matches!(build_scenario(&file, &flat_terrain(), None), Err(Error::Validation(_))));
    }

    #[test]
    fn building_outside_bbox_rejected() {
        let text = MINIMAL.replace("[51.0006, 7.0004]", "[51.0016, 7.0004]");
        let file = ScenarioFile::from_json_str(&text, "s.json").unwrap();
        match build_scenario(&file, &flat_terrain(), None) {
            Err(Error::Validation(msg)) => assert!(msg.contains("b1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\n  \"bbox\": {\"lat_min\": 51.0,\n  oops }";
        match ScenarioFile::from_json_str(text, "s.json") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_load() {
        let file = ScenarioFile::from_json_str(MINIMAL, "s.json").unwrap();
        let a = build_scenario(&file, &flat_terrain(), None).unwrap();
        let b = build_scenario(&file, &flat_terrain(), None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(Scenario::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn measurement_csv_round_trip_and_gates() {
        let file = ScenarioFile::from_json_str(MINIMAL, "s.json").unwrap();
        let s = build_scenario(&file, &flat_terrain(), None).unwrap();
        let csv = "lat,lon,alt_m,cell_id,rsrp_dbm\n51.0005,7.0001,,c1,-95.5\n51.0004,7.0001,2.0,c1,-80\n";
        let ms = parse_measurements(csv.as_bytes(), "m.csv", &s).unwrap();
        assert_eq!(ms.len(), 2);
        assert!((ms[0].position.z - 101.5).abs() < 1e-9);
        assert!((ms[1].position.z - 102.0).abs() < 1e-9);

        let mut buf = Vec::new();
        write_measurements(&mut buf, &ms, &s).unwrap();
        let again = parse_measurements(buf.as_slice(), "m2.csv", &s).unwrap();
        for (a, b) in ms.iter().zip(&again) {
            assert!(a.position.dist_3d(&b.position) < 1e-3);
            assert_eq!(a.rsrp_dbm, b.rsrp_dbm);
        }

        let bad = "lat,lon,alt_m,cell_id,rsrp_dbm\n51.0005,7.0001,,c1,-20\n";
        match parse_measurements(bad.as_bytes(), "m.csv", &s) {
            Err(Error::Parse { line, field, .. }) => assert_eq!((line, field.as_str()), (2, "rsrp_dbm")),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "lat,lon,alt,cell_id,rsrp_dbm\n";
        assert!(parse_measurements(bad_header.as_bytes(), "m.csv", &s).is_err());
    }

    #[test]
    fn scenario_file_round_trip_preserves_annotation() {
        let text = MINIMAL.replace("[51.0006, 7.0004]]}", "[51.0006, 7.0004]], \"height_m\": 21.0}");
        let file = ScenarioFile::from_json_str(&text, "s.json").unwrap();
        let s = build_scenario(&file, &flat_terrain(), None).unwrap();
        let back = ScenarioFile::from_scenario(&s);
        assert_eq!(back.buildings[0].height_m, Some(21.0));
        let s2 = build_scenario(&back, &flat_terrain(), None).unwrap();
        assert!((s2.buildings()[0].footprint[0].x - s.buildings()[0].footprint[0].x).abs() < 1e-6);
    }
}
