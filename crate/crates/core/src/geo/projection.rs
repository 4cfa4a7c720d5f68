use serde::{Deserialize, Serialize};

use super::{GeoPoint, LocalPoint};

/// WGS84 semi-major axis. One degree of arc on it is ~111.32 km.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Equirectangular tangent-plane projection around a reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub lat0: f64,
    pub lon0: f64,
    pub m_per_deg_lat: f64,
    pub m_per_deg_lon: f64,
}

impl Projection {
    pub fn centered(lat0: f64, lon0: f64) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Projection {
            lat0,
            lon0,
            m_per_deg_lat,
            m_per_deg_lon: m_per_deg_lat * lat0.to_radians().cos(),
        }
    }

    pub fn project(&self, p: &GeoPoint) -> LocalPoint {
        LocalPoint::new(
            (p.lon - self.lon0) * self.m_per_deg_lon,
            (p.lat - self.lat0) * self.m_per_deg_lat,
            p.alt_m,
        )
    }

    pub fn unproject(&self, p: &LocalPoint) -> GeoPoint {
        GeoPoint {
            lat: self.lat0 + p.y / self.m_per_deg_lat,
            lon: self.lon0 + p.x / self.m_per_deg_lon,
            alt_m: p.z,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_point_maps_to_origin() {
        let proj = Projection::centered(51.5, 7.4);
        let p = proj.project(&GeoPoint::new(51.5, 7.4, 0.0).unwrap());
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn one_degree_of_longitude_at_the_equator() {
        // Independent equirectangular evaluation: arc length of 1 degree on a 6378.137 km sphere.
        let expected = 2.0 * std::f64::consts::PI * 6_378_137.0 / 360.0;
        let proj = Projection::centered(0.0, 0.0);
        let p = proj.project(&GeoPoint::new(0.0, 1.0, 0.0).unwrap());
        assert!((p.x - 111_320.0).abs() < 50.0, "x = {}", p.x);
        assert!((p.x - expected).abs() < 1e-6);
    }

    #[test]
    fn scale_invariant_holds() {
        for lat0 in [-60.0, 0.0, 12.5, 51.5, 89.0] {
            let proj = Projection::centered(lat0, 3.0);
            let expected = proj.m_per_deg_lat * f64::to_radians(lat0).cos();
            assert!(((proj.m_per_deg_lon - expected) / expected).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_degree(
            lat0 in -80.0f64..80.0,
            lon0 in -179.0f64..179.0,
            dlat in -0.5f64..0.5,
            dlon in -0.5f64..0.5,
        ) {
            let proj = Projection::centered(lat0, lon0);
            let g = GeoPoint::new(lat0 + dlat, lon0 + dlon, 12.0).unwrap();
            let back = proj.unproject(&proj.project(&g));
            prop_assert!((back.lat - g.lat).abs() < 1e-9);
            prop_assert!((back.lon - g.lon).abs() < 1e-9);
            prop_assert_eq!(back.alt_m, g.alt_m);
        }
    }
}
