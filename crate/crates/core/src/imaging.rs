//! Receiver-centric raster views of the environment.
//!
//! Both views are point-sampled at pixel centers with no anti-aliasing, so
//! every pixel is exactly one of the palette intensities below.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Building, LocalPoint, Scenario};

pub const IMAGE_SIZE: usize = 64;
/// Side length of the top-view window, meters.
pub const TOP_WINDOW_M: f64 = 300.0;
/// Height of the side-view window, meters, centered on the receiver.
pub const SIDE_WINDOW_M: f64 = 150.0;

pub const BACKGROUND: f32 = 1.0;
pub const TERRAIN: f32 = 0.5;
pub const BUILDING: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn filled(value: f32) -> Self {
        GrayImage {
            pixels: vec![value; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::Shape(format!(
                "image needs {} pixels, got {}",
                IMAGE_SIZE * IMAGE_SIZE,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel intensity {p} outside [0, 1]")));
        }
        Ok(GrayImage { pixels })
    }

    pub fn width(&self) -> usize {
        IMAGE_SIZE
    }

    pub fn height(&self) -> usize {
        IMAGE_SIZE
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIZE + col]
    }

    fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * IMAGE_SIZE + col] = v;
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Binary PGM (P5, maxval 255), intensity `round(pixel * 255)`.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_pgm(&mut w, IMAGE_SIZE, IMAGE_SIZE, None, self.pixels.iter().map(|&p| p as f64))
    }
}

pub(crate) fn write_pgm<W: Write>(
    w: &mut W,
    width: usize,
    height: usize,
    comment: Option<&str>,
    values: impl Iterator<Item = f64>,
) -> std::io::Result<()> {
    writeln!(w, "P5")?;
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    write!(w, "{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub top: GrayImage,
    pub side: GrayImage,
}

/// Single-channel 128x64 grid: top view over side view.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl IntensityGrid {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    /// SHA-256 over the little-endian bytes of the intensities.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn concat_vertical(pair: &ImagePair) -> IntensityGrid {
    let mut data = Vec::with_capacity(2 * IMAGE_SIZE * IMAGE_SIZE);
    data.extend_from_slice(pair.top.pixels());
    data.extend_from_slice(pair.side.pixels());
    IntensityGrid {
        rows: 2 * IMAGE_SIZE,
        cols: IMAGE_SIZE,
        data,
    }
}

fn bearing(rx: &LocalPoint, tx: &LocalPoint) -> Result<(f64, f64, f64)> {
    let (dx, dy) = (tx.x - rx.x, tx.y - rx.y);
    let d = dx.hypot(dy);
    if d == 0.0 {
        return Err(Error::DegeneratePath("receiver and transmitter share a plan position".into()));
    }
    Ok((dx / d, dy / d, d))
}

/// Top view: 300 m square centered on the receiver, rotated so the
/// transmitter lies along +x (to the right). Buildings are 0, background 1.
pub fn render_top(s: &Scenario, rx: &LocalPoint, tx: &LocalPoint) -> Result<GrayImage> {
    let (ux, uy, _) = bearing(rx, tx)?;
    let half = 0.5 * TOP_WINDOW_M;
    let reach = half * std::f64::consts::SQRT_2;
    let nearby: Vec<&Building> = s
        .buildings()
        .iter()
        .filter(|b| {
            let r = b.bounds();
            r.x_max >= rx.x - reach && r.x_min <= rx.x + reach && r.y_max >= rx.y - reach && r.y_min <= rx.y + reach
        })
        .collect();
    let mut img = GrayImage::filled(BACKGROUND);
    if nearby.is_empty() {
        return Ok(img);
    }
    let px = TOP_WINDOW_M / IMAGE_SIZE as f64;
    for row in 0..IMAGE_SIZE {
        // Up in the image is to the left of the bearing.
        let v = half - (row as f64 + 0.5) * px;
        for col in 0..IMAGE_SIZE {
            let u = (col as f64 + 0.5) * px - half;
            let x = rx.x + u * ux - v * uy;
            let y = rx.y + u * uy + v * ux;
            if nearby.iter().any(|b| b.footprint_contains(x, y)) {
                img.set(row, col, BUILDING);
            }
        }
    }
    Ok(img)
}

/// Side view: vertical slice along the direct path. Columns span the
/// horizontal distance from the receiver (left) to the transmitter; rows span
/// 150 m centered on the receiver height. Buildings 0, below terrain 0.5.
pub fn render_side(s: &Scenario, rx: &LocalPoint, tx: &LocalPoint) -> Result<GrayImage> {
    let (ux, uy, d_2d) = bearing(rx, tx)?;
    let path_bounds = crate::geometry::Rect::from_points([rx.xy(), tx.xy()]).expect("two points");
    let nearby: Vec<&Building> = s.buildings().iter().filter(|b| b.bounds().intersects(&path_bounds)).collect();
    let dz = SIDE_WINDOW_M / IMAGE_SIZE as f64;
    let top_z = rx.z + 0.5 * SIDE_WINDOW_M;
    let mut img = GrayImage::filled(BACKGROUND);
    let mut hits: Vec<(f64, f64)> = Vec::new();
    for col in 0..IMAGE_SIZE {
        let dist = (col as f64 + 0.5) / IMAGE_SIZE as f64 * d_2d;
        let (x, y) = (rx.x + dist * ux, rx.y + dist * uy);
        let ground = s.terrain_elevation(x, y)?;
        hits.clear();
        hits.extend(nearby.iter().filter(|b| b.footprint_contains(x, y)).map(|b| (b.base_m, b.top_m())));
        for row in 0..IMAGE_SIZE {
            let z = top_z - (row as f64 + 0.5) * dz;
            let v = if hits.iter().any(|&(lo, hi)| z >= lo && z <= hi) {
                BUILDING
            } else if z < ground {
                TERRAIN
            } else {
                BACKGROUND
            };
            img.set(row, col, v);
        }
    }
    Ok(img)
}

pub fn render_pair(s: &Scenario, rx: &LocalPoint, tx: &LocalPoint) -> Result<ImagePair> {
    Ok(ImagePair {
        top: render_top(s, rx, tx)?,
        side: render_side(s, rx, tx)?,
    })
}
