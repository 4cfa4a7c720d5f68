//! Planar polygon helpers shared by the tracer and the renderers.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in the local metric frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_points<I: IntoIterator<Item = [f64; 2]>>(points: I) -> Option<Self> {
        let mut iter = points.into_iter();
        let [x, y] = iter.next()?;
        let mut r = Rect::new(x, y, x, y);
        for [x, y] in iter {
            r.x_min = r.x_min.min(x);
            r.y_min = r.y_min.min(y);
            r.x_max = r.x_max.max(x);
            r.y_max = r.y_max.max(y);
        }
        Some(r)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        x >= self.x_min - tol && x <= self.x_max + tol && y >= self.y_min - tol && y <= self.y_max + tol
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Outside,
    Boundary,
}

/// Shoelace area, positive for counter-clockwise rings.
pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

pub fn centroid(ring: &[[f64; 2]]) -> [f64; 2] {
    let n = ring.len();
    let area = signed_area(ring);
    if area.abs() < 1e-12 {
        let (sx, sy) = ring.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        return [sx / n as f64, sy / n as f64];
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let [x0, y0] = ring[i];
        let [x1, y1] = ring[(i + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    [cx / (6.0 * area), cy / (6.0 * area)]
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True when no two non-adjacent edges of the ring touch and no vertex repeats.
pub fn is_simple(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if ring[i] == ring[j] {
                return false;
            }
        }
    }
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let c = ring[j];
            let d = ring[(j + 1) % n];
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    signed_area(ring).abs() > 0.0
}

fn dist_to_segment_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    qx * qx + qy * qy
}

/// Classifies `p` against the ring. Points within `tol` of an edge are on the boundary.
pub fn point_in_polygon(p: [f64; 2], ring: &[[f64; 2]], tol: f64) -> Containment {
    let n = ring.len();
    let tol_sq = tol * tol;
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if dist_to_segment_sq(p, a, b) <= tol_sq {
            return Containment::Boundary;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
    }
    if inside {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

/// Parameters in (0, 1) where segment `p0 -> p1` crosses an edge of the ring.
pub fn segment_ring_crossings(p0: [f64; 2], p1: [f64; 2], ring: &[[f64; 2]], out: &mut Vec<f64>) {
    let (rx, ry) = (p1[0] - p0[0], p1[1] - p0[1]);
    let n = ring.len();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let (sx, sy) = (b[0] - a[0], b[1] - a[1]);
        let denom = rx * sy - ry * sx;
        let (qx, qy) = (a[0] - p0[0], a[1] - p0[1]);
        if denom == 0.0 {
            // Parallel (possibly collinear): collinear overlap endpoints are boundary events.
            if qx * ry - qy * rx == 0.0 {
                let len_sq = rx * rx + ry * ry;
                if len_sq > 0.0 {
                    for v in [a, b] {
                        let t = ((v[0] - p0[0]) * rx + (v[1] - p0[1]) * ry) / len_sq;
                        if t > 0.0 && t < 1.0 {
                            out.push(t);
                        }
                    }
                }
            }
            continue;
        }
        let t = (qx * sy - qy * sx) / denom;
        let u = (qx * ry - qy * rx) / denom;
        if (0.0..=1.0).contains(&u) && t > 0.0 && t < 1.0 {
            out.push(t);
        }
    }
}
