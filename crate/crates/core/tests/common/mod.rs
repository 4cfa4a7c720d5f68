//! Random scenes and brute-force oracles shared by the integration tests.
//! The oracles use their own point-in-polygon and bilinear code so they do
//! not share logic with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rem_core::geo::{Building, HeightSource, LocalPoint, Projection, Scenario, TerrainGrid};
use rem_core::geometry::Rect;

pub const HALF_M: f64 = 200.0;
const TERRAIN_CELL_M: f64 = 25.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rotated_rectangle(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> Vec<LocalPoint> {
    let (w, h) = (rng.random_range(10.0..60.0), rng.random_range(10.0..60.0));
    let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
        .iter()
        .map(|&(a, b)| {
            let (dx, dy) = (a * w, b * h);
            LocalPoint::new(cx + c * dx - s * dy, cy + s * dx + c * dy, 0.0)
        })
        .collect()
}

/// Star-shaped about its center, so simple but usually not convex.
fn star_polygon(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> Vec<LocalPoint> {
    let n = rng.random_range(5..10);
    let step = std::f64::consts::TAU / n as f64;
    (0..n)
        .map(|i| {
            let a = (i as f64 + rng.random_range(-0.3..0.3)) * step;
            let r = rng.random_range(10.0..40.0);
            LocalPoint::new(cx + r * a.cos(), cy + r * a.sin(), 0.0)
        })
        .collect()
}

/// A 400 m square scene with up to `max_buildings` possibly overlapping
/// prisms over terrain with `relief_m` of random relief.
pub fn random_scene(rng: &mut ChaCha8Rng, max_buildings: usize, relief_m: f64) -> Scenario {
    let n = ((2.0 * HALF_M) / TERRAIN_CELL_M) as usize + 4;
    let origin = LocalPoint::new(-HALF_M - 2.0 * TERRAIN_CELL_M, -HALF_M - 2.0 * TERRAIN_CELL_M, 0.0);
    let elevation: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..=relief_m)).collect();
    let terrain = TerrainGrid::new(origin, TERRAIN_CELL_M, n, n, elevation).unwrap();
    let count = rng.random_range(0..=max_buildings);
    let buildings = (0..count)
        .map(|i| {
            let (cx, cy) = (rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0));
            let fp = if rng.random_bool(0.7) {
                rotated_rectangle(rng, cx, cy)
            } else {
                star_polygon(rng, cx, cy)
            };
            let base = terrain.elevation_at(cx, cy).unwrap();
            Building::new(format!("b{i}"), fp, rng.random_range(5.0..50.0), HeightSource::Annotated, base).unwrap()
        })
        .collect();
    Scenario::new(
        Projection::centered(50.0, 7.0),
        Rect::new(-HALF_M, -HALF_M, HALF_M, HALF_M),
        buildings,
        terrain,
        vec![],
    )
    .unwrap()
}

/// A transmitter 10 to 60 m and a receiver 1.5 to 30 m above ground.
pub fn random_link(rng: &mut ChaCha8Rng, s: &Scenario) -> (LocalPoint, LocalPoint) {
    let lim = HALF_M - 10.0;
    loop {
        let (tx, ty) = (rng.random_range(-lim..lim), rng.random_range(-lim..lim));
        let (rx, ry) = (rng.random_range(-lim..lim), rng.random_range(-lim..lim));
        if (tx - rx).hypot(ty - ry) < 5.0 {
            continue;
        }
        let tx = s.above_ground(tx, ty, rng.random_range(10.0..60.0)).unwrap();
        let rx = s.above_ground(rx, ry, rng.random_range(1.5..30.0)).unwrap();
        return (tx, rx);
    }
}

/// Even-odd crossing test.
pub fn inside_polygon(x: f64, y: f64, poly: &[LocalPoint]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (&poly[i], &poly[j]);
        if (a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Bilinear interpolation between cell centers.
pub fn ground_at(t: &TerrainGrid, x: f64, y: f64) -> f64 {
    let gx = (x - t.origin.x) / t.cell_size_m - 0.5;
    let gy = (y - t.origin.y) / t.cell_size_m - 0.5;
    let c = (gx.floor().max(0.0) as usize).min(t.cols - 2);
    let r = (gy.floor().max(0.0) as usize).min(t.rows - 2);
    let (fx, fy) = (gx - c as f64, gy - r as f64);
    let z = |r: usize, c: usize| t.elevation[r * t.cols + c];
    z(r, c) * (1.0 - fx) * (1.0 - fy) + z(r, c + 1) * fx * (1.0 - fy) + z(r + 1, c) * (1.0 - fx) * fy
        + z(r + 1, c + 1) * fx * fy
}

#[derive(Debug, Clone, Copy)]
pub struct SampledProfile {
    pub n_obs: usize,
    pub d_obs: f64,
    pub n_ter: usize,
    pub d_ter: f64,
}

/// Classifies `n` evenly spaced points on the segment and counts runs.
pub fn sample_profile(s: &Scenario, tx: &LocalPoint, rx: &LocalPoint, n: usize) -> SampledProfile {
    let d_3d = ((tx.x - rx.x).powi(2) + (tx.y - rx.y).powi(2) + (tx.z - rx.z).powi(2)).sqrt();
    let boxes: Vec<_> = s.buildings().iter().map(|b| (b, b.bounds())).collect();
    let (mut n_obs, mut in_obs, mut c_obs) = (0, false, 0usize);
    let (mut n_ter, mut in_ter, mut c_ter) = (0, false, 0usize);
    for i in 0..n {
        let t = (i as f64 + 0.5) / n as f64;
        let (x, y, z) = (tx.x + t * (rx.x - tx.x), tx.y + t * (rx.y - tx.y), tx.z + t * (rx.z - tx.z));
        let obs = boxes.iter().any(|(b, r)| {
            x >= r.x_min
                && x <= r.x_max
                && y >= r.y_min
                && y <= r.y_max
                && z >= b.base_m
                && z <= b.top_m()
                && inside_polygon(x, y, &b.footprint)
        });
        let ter = z < ground_at(s.terrain(), x, y);
        if obs {
            c_obs += 1;
            n_obs += usize::from(!in_obs);
        }
        if ter {
            c_ter += 1;
            n_ter += usize::from(!in_ter);
        }
        (in_obs, in_ter) = (obs, ter);
    }
    let step = d_3d / n as f64;
    SampledProfile {
        n_obs,
        d_obs: c_obs as f64 * step,
        n_ter,
        d_ter: c_ter as f64 * step,
    }
}
