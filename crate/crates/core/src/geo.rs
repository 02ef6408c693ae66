//! Geodesic primitives shared by route creation and map matching.
//!
//! All distances are great-circle (haversine) in meters so the metric
//! thresholds used elsewhere (node reuse, map-match, next-stop radius)
//! apply directly.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS-84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates ranges: lat in [-90, 90], lon in [-180, 180], both finite.
    pub fn new(lat: f64, lon: f64) -> Result<Self, Error> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoordinate(format!("lat {lat}")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidCoordinate(format!("lon {lon}")));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance between two points, in meters.
pub fn dist(p: GeoPoint, q: GeoPoint) -> f64 {
    let lat1 = p.lat.to_radians();
    let lat2 = q.lat.to_radians();
    let dlat = (q.lat - p.lat).to_radians();
    let dlon = (q.lon - p.lon).to_radians();

    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Triangle-inequality slack dist(a,b) + dist(b,c) - dist(a,c).
///
/// Zero when `b` lies on the shortest path from `a` to `c`; tiny negative
/// rounding results are clamped to zero so accumulated error stays monotone.
pub fn linearity_error(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (dist(a, b) + dist(b, c) - dist(a, c)).max(0.0)
}

/// Displaces a point by the given north/east offsets in meters.
///
/// Small-offset approximation, plenty accurate at city scale; used by the
/// simulator (GPS noise) and by tests to construct points at known distances.
pub fn offset(p: GeoPoint, north_m: f64, east_m: f64) -> GeoPoint {
    let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
    let dlon = (east_m / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees();
    GeoPoint {
        lat: p.lat + dlat,
        lon: p.lon + dlon,
    }
}

/// Linear interpolation between two points (fraction `t` in [0, 1]).
///
/// At sub-kilometer link lengths this stays within centimeters of the
/// great-circle path, which is all the simulator needs.
pub fn interpolate(p: GeoPoint, q: GeoPoint, t: f64) -> GeoPoint {
    GeoPoint {
        lat: p.lat + (q.lat - p.lat) * t,
        lon: p.lon + (q.lon - p.lon) * t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn dist_identity_is_zero() {
        let p = pt(12.3456, 77.6543);
        assert_eq!(dist(p, p), 0.0);
    }

    #[test]
    fn one_degree_of_latitude() {
        // Independently computed great-circle value for R = 6 371 000 m.
        let d = dist(pt(12.0, 77.0), pt(13.0, 77.0));
        assert!((d - 111_194.9266).abs() < 0.5, "got {d}");
    }

    #[test]
    fn dist_is_symmetric() {
        let p = pt(12.9, 77.5);
        let q = pt(13.1, 77.8);
        assert_eq!(dist(p, q), dist(q, p));
    }

    #[test]
    fn linearity_error_collinear_meridian() {
        let a = pt(12.0, 77.0);
        let b = pt(12.005, 77.0);
        let c = pt(12.01, 77.0);
        assert!(linearity_error(a, b, c) < 1e-6);
    }

    #[test]
    fn linearity_error_right_angle_corner() {
        // Legs of ~109 m and ~111 m at 90 degrees; independently computed
        // slack is ~64.4 m.
        let a = pt(12.000, 77.000);
        let b = pt(12.000, 77.001);
        let c = pt(12.001, 77.001);
        let legs = dist(a, b) + dist(b, c) - dist(a, c);
        let err = linearity_error(a, b, c);
        assert!(err > 0.0);
        assert!((err - legs).abs() < 1e-9);
        assert!((err - 64.415).abs() < 0.01, "got {err}");
    }

    #[test]
    fn linearity_error_degenerate_b_equals_a() {
        let a = pt(12.0, 77.0);
        let c = pt(12.3, 77.3);
        assert_eq!(linearity_error(a, a, c), 0.0);
    }

    #[test]
    fn offset_round_trip_distance() {
        let p = pt(12.9, 77.5);
        assert!((dist(p, offset(p, 24.0, 0.0)) - 24.0).abs() < 1e-6);
        assert!((dist(p, offset(p, 0.0, 30.0)) - 30.0).abs() < 1e-6);
        assert!((dist(p, offset(p, -40.0, 0.0)) - 40.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }
}
