//! Coordinates and the cylindrical distance metric.
//!
//! The domain is the cylinder: latitude is Euclidean, longitude wraps. All
//! public interfaces work in degrees; the only radian conversion in the
//! crate happens inside the circular convolutions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the cylinder in degrees. `lat` is bounded, `lon` is stored
/// normalized into `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    lat: f64,
    lon: f64,
}

impl Location {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid(format!("non-finite coordinates ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(Self { lat, lon: normalize_lon(lon) })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Wrap a longitude into `[-180, 180)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let r = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return exactly 360 through rounding for inputs just
    // below a wrap point, leaving r == 180.0.
    if r >= 180.0 {
        -180.0
    } else {
        r
    }
}

/// Wraparound distance between two longitudes, in `[0, 180]`.
pub fn circular_lon_distance(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!("non-finite longitude ({a}, {b})")));
    }
    let d = (a - b).abs().rem_euclid(360.0);
    Ok(d.min(360.0 - d))
}

/// Shortest path on the cylinder: Euclidean in latitude, wraparound in
/// longitude, combined by the Pythagorean theorem. No cos(lat) correction
/// is applied anywhere; the varying radius of the sphere is absorbed by the
/// spatially varying longitudinal scale field.
pub fn cyl_distance(x: &Location, y: &Location) -> f64 {
    let dlat = x.lat - y.lat;
    let dlon = circular_lon_distance(x.lon, y.lon).expect("Location lon is finite");
    (dlat * dlat + dlon * dlon).sqrt()
}

/// Cylindrical distance with per-dimension scales. The scales are the ones
/// attached to the first argument, so with spatially varying fields this is
/// not symmetric in `(x, u)`.
pub fn scaled_cyl_distance(x: &Location, u: &Location, theta_lat: f64, theta_lon: f64) -> Result<f64> {
    if !(theta_lat > 0.0) || !(theta_lon > 0.0) {
        return Err(Error::invalid(format!(
            "correlation scales must be positive (theta_lat={theta_lat}, theta_lon={theta_lon})"
        )));
    }
    let dlat = x.lat - u.lat;
    let dlon = circular_lon_distance(x.lon, u.lon)?;
    Ok((dlat * dlat / theta_lat + dlon * dlon / theta_lon).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn loc(lat: f64, lon: f64) -> Location {
        Location::new(lat, lon).unwrap()
    }

    #[test]
    fn location_normalizes_lon() {
        assert_eq!(loc(0.0, 180.0).lon(), -180.0);
        assert_eq!(loc(0.0, 359.0).lon(), -1.0);
        assert_eq!(loc(0.0, -181.0).lon(), 179.0);
        assert!(Location::new(95.0, 0.0).is_err());
        assert!(Location::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn lon_distance_examples() {
        assert_eq!(circular_lon_distance(0.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(circular_lon_distance(179.0, -179.0).unwrap(), 2.0);
        assert_relative_eq!(circular_lon_distance(10.0, 100.0).unwrap(), 90.0);
        assert!(circular_lon_distance(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn cyl_distance_examples() {
        assert_relative_eq!(cyl_distance(&loc(0.0, 0.0), &loc(3.0, 4.0)), 5.0);
        assert_eq!(cyl_distance(&loc(37.5, -12.25), &loc(37.5, -12.25)), 0.0);
        assert_relative_eq!(cyl_distance(&loc(0.0, 179.0), &loc(0.0, -179.0)), 2.0);
    }

    #[test]
    fn scaled_distance_examples() {
        let x = loc(0.0, 0.0);
        assert_relative_eq!(scaled_cyl_distance(&x, &loc(3.0, 4.0), 1.0, 1.0).unwrap(), 5.0);
        assert_relative_eq!(scaled_cyl_distance(&x, &loc(3.0, 0.0), 9.0, 1.0).unwrap(), 1.0);
        // Hand evaluation: sqrt(9/9 + 16/4) = sqrt(5).
        assert_relative_eq!(
            scaled_cyl_distance(&x, &loc(3.0, 4.0), 9.0, 4.0).unwrap(),
            5.0_f64.sqrt(),
            max_relative = 1e-15
        );
        assert!(scaled_cyl_distance(&x, &loc(3.0, 4.0), 0.0, 1.0).is_err());
        assert!(scaled_cyl_distance(&x, &loc(3.0, 4.0), 1.0, -2.0).is_err());
    }

    proptest! {
        #[test]
        fn lon_distance_periodic(a in -180.0..180.0f64, b in -180.0..180.0f64, k in -3i32..=3) {
            let d0 = circular_lon_distance(a, b).unwrap();
            let d1 = circular_lon_distance(a + 360.0 * f64::from(k), b).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&d0));
        }

        #[test]
        fn cyl_distance_is_a_metric(
            lats in proptest::array::uniform3(-90.0..90.0f64),
            lons in proptest::array::uniform3(-180.0..180.0f64),
        ) {
            let p: Vec<Location> = (0..3).map(|i| loc(lats[i], lons[i])).collect();
            let d01 = cyl_distance(&p[0], &p[1]);
            let d10 = cyl_distance(&p[1], &p[0]);
            let d02 = cyl_distance(&p[0], &p[2]);
            let d12 = cyl_distance(&p[1], &p[2]);
            prop_assert!(d01 >= 0.0);
            prop_assert!((d01 - d10).abs() < 1e-12);
            // Triangle inequality with a rounding allowance.
            prop_assert!(d02 <= d01 + d12 + 1e-9);
        }

        #[test]
        fn unit_scales_reduce_to_plain_distance(
            lat_x in -90.0..90.0f64, lon_x in -180.0..180.0f64,
            lat_u in -90.0..90.0f64, lon_u in -180.0..180.0f64,
        ) {
            let x = loc(lat_x, lon_x);
            let u = loc(lat_u, lon_u);
            let lhs = scaled_cyl_distance(&x, &u, 1.0, 1.0).unwrap();
            prop_assert!((lhs - cyl_distance(&x, &u)).abs() < 1e-12);
        }
    }
}
