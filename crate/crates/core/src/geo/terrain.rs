//! Terrain and height rasters.
//!
//! Rasters arrive as ESRI ASCII grids georeferenced in degrees and are
//! resampled once, at load time, onto square metric cells in the local frame.
//! Internally row 0 is the southernmost row.

use serde::{Deserialize, Serialize};

use super::{LocalPoint, Projection};
use crate::error::{Error, Result};

pub const DEFAULT_TERRAIN_CELL_M: f64 = 25.0;

/// Elevation model in meters above sea level, sampled at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainGrid {
    /// Southwest corner of the grid.
    pub origin: LocalPoint,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub elevation: Vec<f64>,
}

impl TerrainGrid {
    pub fn new(origin: LocalPoint, cell_size_m: f64, rows: usize, cols: usize, elevation: Vec<f64>) -> Result<Self> {
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::Validation(format!("terrain cell size must be positive, got {cell_size_m}")));
        }
        if rows < 2 || cols < 2 {
            return Err(Error::Validation(format!(
                "terrain grid needs at least 2x2 cells to interpolate, got {rows}x{cols}"
            )));
        }
        if elevation.len() != rows * cols {
            return Err(Error::Validation(format!(
                "terrain grid has {} values, expected {}",
                elevation.len(),
                rows * cols
            )));
        }
        if let Some(i) = elevation.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("terrain elevation at index {i} is not finite")));
        }
        Ok(TerrainGrid {
            origin,
            cell_size_m,
            rows,
            cols,
            elevation,
        })
    }

    /// Constant-elevation grid whose interpolable extent covers `[x_min, x_max] x [y_min, y_max]`.
    pub fn flat(x_min: f64, y_min: f64, x_max: f64, y_max: f64, cell_size_m: f64, elevation_m: f64) -> Result<Self> {
        let cols = ((x_max - x_min) / cell_size_m).ceil() as usize + 2;
        let rows = ((y_max - y_min) / cell_size_m).ceil() as usize + 2;
        let origin = LocalPoint::new(x_min - cell_size_m, y_min - cell_size_m, 0.0);
        TerrainGrid::new(origin, cell_size_m, rows, cols, vec![elevation_m; rows * cols])
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.elevation[row * self.cols + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.x + (col as f64 + 0.5) * self.cell_size_m,
            self.origin.y + (row as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Rectangle spanned by the outermost cell centers.
    pub fn interpolable_extent(&self) -> crate::geometry::Rect {
        let (x0, y0) = self.cell_center(0, 0);
        let (x1, y1) = self.cell_center(self.rows - 1, self.cols - 1);
        crate::geometry::Rect::new(x0, y0, x1, y1)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> TerrainGrid {
        let mut t = self.clone();
        t.origin.x += dx;
        t.origin.y += dy;
        t
    }

    /// Bilinear interpolation over the four surrounding cell centers.
    pub fn elevation_at(&self, x: f64, y: f64) -> Result<f64> {
        let fx = (x - self.origin.x) / self.cell_size_m - 0.5;
        let fy = (y - self.origin.y) / self.cell_size_m - 0.5;
        let tol = 1e-9;
        let max_x = (self.cols - 1) as f64;
        let max_y = (self.rows - 1) as f64;
        if !(fx >= -tol && fx <= max_x + tol && fy >= -tol && fy <= max_y + tol) {
            return Err(Error::OutOfBounds { x, y });
        }
        let fx = fx.clamp(0.0, max_x);
        let fy = fy.clamp(0.0, max_y);
        let c = (fx.floor() as usize).min(self.cols - 2);
        let r = (fy.floor() as usize).min(self.rows - 2);
        let tx = fx - c as f64;
        let ty = fy - r as f64;
        let v00 = self.value(r, c);
        let v01 = self.value(r, c + 1);
        let v10 = self.value(r + 1, c);
        let v11 = self.value(r + 1, c + 1);
        let south = (1.0 - tx) * v00 + tx * v01;
        let north = (1.0 - tx) * v10 + tx * v11;
        Ok((1.0 - ty) * south + ty * north)
    }
}

/// Above-ground structure heights on a metric grid. NaN marks cells without data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightRaster {
    pub origin: LocalPoint,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f64>,
}

impl HeightRaster {
    pub fn new(origin: LocalPoint, cell_size_m: f64, rows: usize, cols: usize, heights: Vec<f64>) -> Result<Self> {
        if !(cell_size_m > 0.0) || heights.len() != rows * cols {
            return Err(Error::Validation(format!(
                "height raster {rows}x{cols} with cell size {cell_size_m} has {} values",
                heights.len()
            )));
        }
        Ok(HeightRaster {
            origin,
            cell_size_m,
            rows,
            cols,
            heights,
        })
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.x + (col as f64 + 0.5) * self.cell_size_m,
            self.origin.y + (row as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Finite values whose cell centers lie inside the closed rectangle.
    pub fn values_in(&self, rect: &crate::geometry::Rect) -> Vec<f64> {
        let cs = self.cell_size_m;
        let c_lo = (((rect.x_min - self.origin.x) / cs - 0.5).ceil().max(0.0)) as usize;
        let r_lo = (((rect.y_min - self.origin.y) / cs - 0.5).ceil().max(0.0)) as usize;
        let c_hi = ((rect.x_max - self.origin.x) / cs - 0.5).floor();
        let r_hi = ((rect.y_max - self.origin.y) / cs - 0.5).floor();
        if c_hi < 0.0 || r_hi < 0.0 {
            return Vec::new();
        }
        let c_hi = (c_hi as usize).min(self.cols.saturating_sub(1));
        let r_hi = (r_hi as usize).min(self.rows.saturating_sub(1));
        let mut out = Vec::new();
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let (x, y) = self.cell_center(r, c);
                if rect.contains(x, y, 0.0) {
                    let v = self.heights[r * self.cols + c];
                    if v.is_finite() {
                        out.push(v);
                    }
                }
            }
        }
        out
    }
}

/// ESRI ASCII grid as read from disk: georeferenced in degrees, first data row northernmost.
#[derive(Debug, Clone, PartialEq)]
pub struct AsciiGrid {
    pub ncols: usize,
    pub nrows: usize,
    /// Longitude of the western edge.
    pub xllcorner: f64,
    /// Latitude of the southern edge.
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: Option<f64>,
    /// Row-major, north row first, NODATA already replaced by NaN.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Nearest,
}

impl AsciiGrid {
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut header: [Option<f64>; 6] = [None; 6];
        let mut center_registered = (false, false);
        let mut lines = text.lines().enumerate().peekable();
        while let Some((idx, line)) = lines.peek().copied() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else {
                lines.next();
                continue;
            };
            let slot = match key.to_ascii_lowercase().as_str() {
                "ncols" => 0,
                "nrows" => 1,
                "xllcorner" => 2,
                "xllcenter" => {
                    center_registered.0 = true;
                    2
                }
                "yllcorner" => 3,
                "yllcenter" => {
                    center_registered.1 = true;
                    3
                }
                "cellsize" => 4,
                "nodata_value" => 5,
                _ => break,
            };
            let raw = parts
                .next()
                .ok_or_else(|| Error::parse(source_name, idx + 1, key, "missing value"))?;
            let value: f64 = raw
                .parse()
                .map_err(|_| Error::parse(source_name, idx + 1, key, format!("not a number: `{raw}`")))?;
            header[slot] = Some(value);
            lines.next();
        }
        let names = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize"];
        for (slot, name) in names.iter().enumerate() {
            if header[slot].is_none() {
                return Err(Error::parse(source_name, 1, *name, "missing header field"));
            }
        }
        let ncols = header[0].unwrap();
        let nrows = header[1].unwrap();
        if ncols < 1.0 || nrows < 1.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
            return Err(Error::parse(source_name, 1, "ncols/nrows", "must be positive integers"));
        }
        let (ncols, nrows) = (ncols as usize, nrows as usize);
        let cellsize = header[4].unwrap();
        if !(cellsize > 0.0) {
            return Err(Error::parse(source_name, 1, "cellsize", "must be positive"));
        }
        let mut xll = header[2].unwrap();
        let mut yll = header[3].unwrap();
        if center_registered.0 {
            xll -= 0.5 * cellsize;
        }
        if center_registered.1 {
            yll -= 0.5 * cellsize;
        }
        let nodata = header[5];
        let mut values = Vec::with_capacity(ncols * nrows);
        for (idx, line) in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::parse(source_name, idx + 1, "values", format!("not a number: `{tok}`"))
                })?;
                values.push(if Some(v) == nodata { f64::NAN } else { v });
            }
        }
        if values.len() != ncols * nrows {
            return Err(Error::parse(
                source_name,
                text.lines().count(),
                "values",
                format!("expected {} values, found {}", ncols * nrows, values.len()),
            ));
        }
        Ok(AsciiGrid {
            ncols,
            nrows,
            xllcorner: xll,
            yllcorner: yll,
            cellsize,
            nodata,
            values,
        })
    }

    pub fn to_ascii(&self) -> String {
        use std::fmt::Write;
        let nodata = self.nodata.unwrap_or(-9999.0);
        let mut s = String::new();
        let _ = writeln!(s, "ncols {}", self.ncols);
        let _ = writeln!(s, "nrows {}", self.nrows);
        let _ = writeln!(s, "xllcorner {}", self.xllcorner);
        let _ = writeln!(s, "yllcorner {}", self.yllcorner);
        let _ = writeln!(s, "cellsize {}", self.cellsize);
        let _ = writeln!(s, "NODATA_value {}", nodata);
        for r in 0..self.nrows {
            let row: Vec<String> = self.values[r * self.ncols..(r + 1) * self.ncols]
                .iter()
                .map(|v| if v.is_nan() { nodata.to_string() } else { v.to_string() })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Value at (south-based row, col).
    fn at(&self, row_from_south: usize, col: usize) -> f64 {
        self.values[(self.nrows - 1 - row_from_south) * self.ncols + col]
    }

    /// Resamples onto square metric cells whose size equals the grid's north-south spacing.
    fn resample(&self, proj: &Projection, mode: Resample) -> (LocalPoint, f64, usize, usize, Vec<f64>) {
        let cs_m = self.cellsize * proj.m_per_deg_lat;
        let sw = proj.project(&super::GeoPoint {
            lat: self.yllcorner,
            lon: self.xllcorner,
            alt_m: 0.0,
        });
        let width_m = self.ncols as f64 * self.cellsize * proj.m_per_deg_lon;
        let height_m = self.nrows as f64 * self.cellsize * proj.m_per_deg_lat;
        let cols = ((width_m / cs_m).round() as usize).max(2);
        let rows = ((height_m / cs_m).round() as usize).max(2);
        let origin = LocalPoint::new(sw.x, sw.y, 0.0);
        let max_c = (self.ncols - 1) as f64;
        let max_r = (self.nrows - 1) as f64;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = origin.x + (c as f64 + 0.5) * cs_m;
                let y = origin.y + (r as f64 + 0.5) * cs_m;
                let g = proj.unproject(&LocalPoint::new(x, y, 0.0));
                let fc = ((g.lon - self.xllcorner) / self.cellsize - 0.5).clamp(0.0, max_c);
                let fr = ((g.lat - self.yllcorner) / self.cellsize - 0.5).clamp(0.0, max_r);
                let v = match mode {
                    Resample::Nearest => self.at(fr.round() as usize, fc.round() as usize),
                    Resample::Bilinear => {
                        let c0 = (fc.floor() as usize).min(self.ncols.saturating_sub(2));
                        let r0 = (fr.floor() as usize).min(self.nrows.saturating_sub(2));
                        let c1 = (c0 + 1).min(self.ncols - 1);
                        let r1 = (r0 + 1).min(self.nrows - 1);
                        let tx = (fc - c0 as f64).clamp(0.0, 1.0);
                        let ty = (fr - r0 as f64).clamp(0.0, 1.0);
                        let s = (1.0 - tx) * self.at(r0, c0) + tx * self.at(r0, c1);
                        let n = (1.0 - tx) * self.at(r1, c0) + tx * self.at(r1, c1);
                        (1.0 - ty) * s + ty * n
                    }
                };
                out.push(v);
            }
        }
        (origin, cs_m, rows, cols, out)
    }

    /// Converts to a terrain model. NODATA cells take the mean of the valid cells.
    pub fn to_terrain(&self, proj: &Projection) -> Result<TerrainGrid> {
        let valid: Vec<f64> = self.values.iter().copied().filter(|v| v.is_finite()).collect();
        if valid.is_empty() {
            return Err(Error::Validation("terrain grid contains no valid elevation".into()));
        }
        let mut filled = self.clone();
        if valid.len() != self.values.len() {
            let mean = valid.iter().sum::<f64>() / valid.len() as f64;
            log::warn!(
                "terrain grid: {} NODATA cells filled with mean elevation {mean:.2} m",
                self.values.len() - valid.len()
            );
            for v in filled.values.iter_mut().filter(|v| !v.is_finite()) {
                *v = mean;
            }
        }
        let (origin, cs, rows, cols, values) = filled.resample(proj, Resample::Bilinear);
        TerrainGrid::new(origin, cs, rows, cols, values)
    }

    pub fn to_height_raster(&self, proj: &Projection) -> Result<HeightRaster> {
        let (origin, cs, rows, cols, values) = self.resample(proj, Resample::Nearest);
        HeightRaster::new(origin, cs, rows, cols, values)
    }
}
