//! Direct-path obstruction analysis between a transmitter and a receiver.
//!
//! Only the straight segment is analyzed. Building penetrations come from
//! exact segment/prism clipping; terrain penetrations from the piecewise
//! quadratic height difference between the segment and the bilinear terrain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Building, LocalPoint, Scenario, TerrainGrid};
use crate::geometry::{self, Containment};

/// Intervals shorter than this (meters along the path) are dropped.
pub const MIN_INTERVAL_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProfile {
    pub d_2d: f64,
    pub d_3d: f64,
    /// Merged building penetration runs.
    pub n_obs: usize,
    pub d_obs: f64,
    pub n_ter: usize,
    pub d_ter: f64,
    /// `(start_m, end_m)` along the slant path, measured from the transmitter.
    pub building_intervals: Vec<(f64, f64)>,
    pub terrain_intervals: Vec<(f64, f64)>,
}

impl PathProfile {
    pub fn is_los(&self) -> bool {
        is_los(self)
    }
}

pub fn is_los(profile: &PathProfile) -> bool {
    profile.n_obs == 0 && profile.n_ter == 0
}

/// Sorts and merges overlapping or touching intervals, then drops slivers.
fn merge_intervals(mut iv: Vec<(f64, f64)>, min_len: f64) -> Vec<(f64, f64)> {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 + min_len => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out.retain(|(s, e)| e - s >= min_len);
    out
}

/// Parametric sub-intervals of `p0 -> p1` strictly inside the building prism.
pub fn segment_prism_intersection(p0: &LocalPoint, p1: &LocalPoint, b: &Building) -> Vec<(f64, f64)> {
    // Vertical extent first: cheapest rejection.
    let (lo, hi) = (b.base_m, b.top_m());
    let dz = p1.z - p0.z;
    let (mut t_lo, mut t_hi) = (0.0f64, 1.0f64);
    if dz == 0.0 {
        if p0.z < lo || p0.z > hi {
            return Vec::new();
        }
    } else {
        let ta = (lo - p0.z) / dz;
        let tb = (hi - p0.z) / dz;
        t_lo = t_lo.max(ta.min(tb));
        t_hi = t_hi.min(ta.max(tb));
        if t_lo >= t_hi {
            return Vec::new();
        }
    }

    let bounds = b.bounds();
    let (x0, y0, x1, y1) = (p0.x, p0.y, p1.x, p1.y);
    if x0.max(x1) < bounds.x_min || x0.min(x1) > bounds.x_max || y0.max(y1) < bounds.y_min || y0.min(y1) > bounds.y_max
    {
        return Vec::new();
    }

    let ring = b.ring();
    let tol = b.containment_tol();
    let len_2d = (x1 - x0).hypot(y1 - y0);
    let mut plan: Vec<(f64, f64)> = Vec::new();
    if len_2d == 0.0 {
        if geometry::point_in_polygon([x0, y0], ring, tol) == Containment::Inside {
            plan.push((0.0, 1.0));
        }
    } else {
        let mut ts = vec![0.0, 1.0];
        geometry::segment_ring_crossings([x0, y0], [x1, y1], ring, &mut ts);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        for w in ts.windows(2) {
            let (a, c) = (w[0], w[1]);
            if c - a <= 0.0 {
                continue;
            }
            let m = 0.5 * (a + c);
            let pm = [x0 + m * (x1 - x0), y0 + m * (y1 - y0)];
            if geometry::point_in_polygon(pm, ring, tol) == Containment::Inside {
                match plan.last_mut() {
                    Some(last) if last.1 == a => last.1 = c,
                    _ => plan.push((a, c)),
                }
            }
        }
    }

    let seg_len = p0.dist_3d(p1);
    plan.into_iter()
        .filter_map(|(a, c)| {
            let (s, e) = (a.max(t_lo), c.min(t_hi));
            ((e - s) * seg_len >= MIN_INTERVAL_M).then_some((s, e))
        })
        .collect()
}

/// Runs where the segment is strictly below the terrain, as parameters in [0, 1].
///
/// Along a straight line the bilinear surface is quadratic inside each terrain
/// cell, so the height difference is solved exactly piece by piece.
pub fn terrain_below_intervals(p0: &LocalPoint, p1: &LocalPoint, terrain: &TerrainGrid) -> Result<Vec<(f64, f64)>> {
    let cs = terrain.cell_size_m;
    let ox = terrain.origin.x + 0.5 * cs;
    let oy = terrain.origin.y + 0.5 * cs;
    // Breakpoints where the segment crosses a line through cell centers.
    let mut ts = vec![0.0, 1.0];
    for (a, b, o) in [(p0.x, p1.x, ox), (p0.y, p1.y, oy)] {
        if a != b {
            let (fa, fb) = ((a - o) / cs, (b - o) / cs);
            let (lo, hi) = (fa.min(fb), fa.max(fb));
            let mut k = lo.floor() + 1.0;
            while k < hi {
                let t = (k - fa) / (fb - fa);
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
                k += 1.0;
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();

    let gap = |t: f64| -> Result<f64> {
        let x = p0.x + t * (p1.x - p0.x);
        let y = p0.y + t * (p1.y - p0.y);
        let z = p0.z + t * (p1.z - p0.z);
        Ok(z - terrain.elevation_at(x, y)?)
    };

    let mut below: Vec<(f64, f64)> = Vec::new();
    for w in ts.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        if h <= 0.0 {
            continue;
        }
        let (ga, gm, gb) = (gap(ta)?, gap(ta + 0.5 * h)?, gap(tb)?);
        // g(ta + u*h) = c0 + c1*u + c2*u^2, u in [0, 1].
        let c0 = ga;
        let c2 = 2.0 * (ga + gb) - 4.0 * gm;
        let c1 = gb - ga - c2;
        let mut roots = Vec::with_capacity(2);
        if c2.abs() > 1e-12 * (c0.abs() + c1.abs() + 1.0) {
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc > 0.0 {
                let sq = disc.sqrt();
                let q = -0.5 * (c1 + c1.signum() * sq);
                for r in [q / c2, if q != 0.0 { c0 / q } else { f64::NAN }] {
                    if r > 0.0 && r < 1.0 {
                        roots.push(r);
                    }
                }
            }
        } else if c1 != 0.0 {
            let r = -c0 / c1;
            if r > 0.0 && r < 1.0 {
                roots.push(r);
            }
        }
        roots.sort_by(f64::total_cmp);
        let mut edges = vec![0.0];
        edges.extend(roots);
        edges.push(1.0);
        for e in edges.windows(2) {
            let u = 0.5 * (e[0] + e[1]);
            if c0 + c1 * u + c2 * u * u < 0.0 {
                below.push((ta + e[0] * h, ta + e[1] * h));
            }
        }
    }
    Ok(merge_intervals(below, 0.0))
}

fn to_meters(iv: Vec<(f64, f64)>, len: f64) -> Vec<(f64, f64)> {
    iv.into_iter().map(|(a, b)| (a * len, b * len)).collect()
}

/// Direct-path obstruction profile from `tx` to `rx`.
pub fn trace(s: &Scenario, tx: &LocalPoint, rx: &LocalPoint) -> Result<PathProfile> {
    if tx == rx {
        return Err(Error::DegeneratePath("transmitter and receiver coincide".into()));
    }
    let d_2d = tx.dist_2d(rx);
    let d_3d = tx.dist_3d(rx);

    let mut raw = Vec::new();
    for b in s.buildings() {
        raw.extend(segment_prism_intersection(tx, rx, b));
    }
    let building_intervals = merge_intervals(to_meters(raw, d_3d), MIN_INTERVAL_M);
    let terrain_raw = terrain_below_intervals(tx, rx, s.terrain())?;
    let terrain_intervals = merge_intervals(to_meters(terrain_raw, d_3d), MIN_INTERVAL_M);

    let clamp = |iv: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        iv.into_iter().map(|(a, b)| (a.clamp(0.0, d_3d), b.clamp(0.0, d_3d))).collect()
    };
    let building_intervals = clamp(building_intervals);
    let terrain_intervals = clamp(terrain_intervals);
    Ok(PathProfile {
        d_2d,
        d_3d,
        n_obs: building_intervals.len(),
        d_obs: building_intervals.iter().map(|(a, b)| b - a).sum(),
        n_ter: terrain_intervals.len(),
        d_ter: terrain_intervals.iter().map(|(a, b)| b - a).sum(),
        building_intervals,
        terrain_intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{HeightSource, Projection};
    use crate::geometry::Rect;

    fn rect_building(id: &str, x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> Building {
        let fp = vec![
            LocalPoint::new(x0, y0, 0.0),
            LocalPoint::new(x1, y0, 0.0),
            LocalPoint::new(x1, y1, 0.0),
            LocalPoint::new(x0, y1, 0.0),
        ];
        Building::new(id, fp, h, HeightSource::Annotated, 0.0).unwrap()
    }

    fn scene(buildings: Vec<Building>) -> Scenario {
        let terrain = TerrainGrid::flat(-100.0, -100.0, 100.0, 100.0, 25.0, 0.0).unwrap();
        Scenario::new(
            Projection::centered(51.0, 7.0),
            Rect::new(-100.0, -100.0, 100.0, 100.0),
            buildings,
            terrain,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn axis_aligned_chord() {
        let s = scene(vec![rect_building("a", 0.0, 0.0, 10.0, 10.0, 20.0)]);
        let p = trace(&s, &LocalPoint::new(-5.0, 5.0, 1.5), &LocalPoint::new(15.0, 5.0, 1.5)).unwrap();
        assert_eq!(p.n_obs, 1);
        assert!((p.d_obs - 10.0).abs() < 1e-12);
        assert_eq!(p.building_intervals, vec![(5.0, 15.0)]);
        assert!(!p.is_los());
    }

    #[test]
    fn two_disjoint_prisms() {
        let s = scene(vec![
            rect_building("a", 0.0, 0.0, 5.0, 10.0, 20.0),
            rect_building("b", 20.0, 0.0, 25.0, 10.0, 20.0),
        ]);
        let p = trace(&s, &LocalPoint::new(-5.0, 5.0, 1.5), &LocalPoint::new(35.0, 5.0, 1.5)).unwrap();
        assert_eq!(p.n_obs, 2);
        assert!((p.d_obs - 10.0).abs() < 0.01);
    }

    #[test]
    fn elevated_tx_clear_los() {
        let s = scene(vec![rect_building("a", 40.0, -10.0, 50.0, 10.0, 20.0)]);
        let p = trace(&s, &LocalPoint::new(45.0, 0.0, 50.0), &LocalPoint::new(90.0, 0.0, 1.5)).unwrap();
        assert_eq!((p.n_obs, p.n_ter), (0, 0));
        assert!(p.is_los());
    }

    #[test]
    fn overlapping_prisms_merge_into_one_run() {
        let s = scene(vec![
            rect_building("a", 0.0, 0.0, 10.0, 10.0, 20.0),
            rect_building("b", 8.0, 0.0, 18.0, 10.0, 20.0),
        ]);
        let p = trace(&s, &LocalPoint::new(-5.0, 5.0, 1.5), &LocalPoint::new(25.0, 5.0, 1.5)).unwrap();
        assert_eq!(p.n_obs, 1);
        assert!((p.d_obs - 18.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_path() {
        let s = scene(vec![]);
        let a = LocalPoint::new(1.0, 2.0, 3.0);
        assert!(matches!(trace(&s, &a, &a), Err(Error::DegeneratePath(_))));
    }

    #[test]
    fn segment_kernel_cases() {
        let b = rect_building("a", 0.0, 0.0, 10.0, 10.0, 20.0);
        // Entirely above the roof.
        assert!(segment_prism_intersection(&LocalPoint::new(-5.0, 5.0, 25.0), &LocalPoint::new(15.0, 5.0, 30.0), &b)
            .is_empty());
        // Fully inside.
        assert_eq!(
            segment_prism_intersection(&LocalPoint::new(2.0, 2.0, 1.0), &LocalPoint::new(8.0, 7.0, 15.0), &b),
            vec![(0.0, 1.0)]
        );
        // Grazing along a vertical face.
        assert!(segment_prism_intersection(&LocalPoint::new(-5.0, 10.0, 1.0), &LocalPoint::new(15.0, 10.0, 1.0), &b)
            .is_empty());
        // Touching a corner only.
        assert!(segment_prism_intersection(&LocalPoint::new(-5.0, 5.0, 1.0), &LocalPoint::new(5.0, 15.0, 1.0), &b)
            .is_empty());
    }

    #[test]
    fn path_clipped_by_roof() {
        // Descending path enters through the roof at z = 20.
        let b = rect_building("a", 0.0, 0.0, 10.0, 10.0, 20.0);
        let iv = segment_prism_intersection(&LocalPoint::new(-10.0, 5.0, 40.0), &LocalPoint::new(10.0, 5.0, 0.0), &b);
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 - 0.5).abs() < 1e-12 && (iv[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terrain_ridge() {
        // Ridge of 30 m in the middle column, zero elsewhere.
        let cols = 9;
        let rows = 3;
        let mut elev = vec![0.0; rows * cols];
        for r in 0..rows {
            elev[r * cols + 4] = 30.0;
        }
        let t = TerrainGrid::new(LocalPoint::new(0.0, 0.0, 0.0), 25.0, rows, cols, elev).unwrap();
        // Segment at z = 15 along the middle row: below terrain where the tent exceeds 15.
        let y = 37.5;
        let iv = terrain_below_intervals(&LocalPoint::new(12.5, y, 15.0), &LocalPoint::new(212.5, y, 15.0), &t).unwrap();
        assert_eq!(iv.len(), 1);
        // Tent peak at x = 112.5, half-width at height 15 is 12.5 m.
        let len = 200.0;
        assert!((iv[0].0 * len - 87.5).abs() < 1e-9, "{iv:?}");
        assert!((iv[0].1 * len - 112.5).abs() < 1e-9);
        let total: f64 = iv.iter().map(|(a, b)| (b - a) * len).sum();
        assert!((total - 25.0).abs() < 1e-9);
    }

    #[test]
    fn merge_handles_touching_and_slivers() {
        let m = merge_intervals(vec![(5.0, 6.0), (0.0, 1.0), (1.0, 2.0), (7.0, 7.0 + 1e-9)], MIN_INTERVAL_M);
        assert_eq!(m, vec![(0.0, 2.0), (5.0, 6.0)]);
    }
}
