//! Points on the unit sphere, great-circle distance and the cube-face
//! gnomonic projection used by the cell partitioner.

use std::fmt;

use crate::{Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Largest `f64` strictly below one; face coordinates are clamped to it so
/// they stay in the half-open range `[0, 1)`.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Latitude/longitude in degrees. Longitude is kept in `[-180, 180)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoCoord {
    lat: f64,
    lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoord { lat, lon });
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn to_unit_vec(&self) -> UnitVec3 {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        UnitVec3 {
            x: lat.cos() * lon.cos(),
            y: lat.cos() * lon.sin(),
            z: lat.sin(),
        }
    }

    /// Point reached by travelling `dist_km` along the great circle with the
    /// given initial bearing (degrees clockwise from north).
    pub fn destination(&self, bearing_deg: f64, dist_km: f64) -> GeoCoord {
        let delta = dist_km / EARTH_RADIUS_KM;
        let theta = bearing_deg.to_radians();
        let (lat1, lon1) = (self.lat.to_radians(), self.lon.to_radians());
        let sin_lat2 = lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos();
        let lat2 = sin_lat2.clamp(-1.0, 1.0).asin();
        let lon2 = lon1
            + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * sin_lat2);
        GeoCoord {
            lat: lat2.to_degrees().clamp(-90.0, 90.0),
            lon: normalize_lon(lon2.to_degrees()),
        }
    }
}

impl fmt::Display for GeoCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    pub fn dot(&self, o: &UnitVec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(x: f64, y: f64, z: f64) -> Option<UnitVec3> {
        let n = (x * x + y * y + z * z).sqrt();
        (n > 0.0 && n.is_finite()).then(|| UnitVec3 {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn to_coord(&self) -> GeoCoord {
        let lat = self
            .z
            .atan2((self.x * self.x + self.y * self.y).sqrt())
            .to_degrees();
        let lon = self.y.atan2(self.x).to_degrees();
        GeoCoord {
            lat: lat.clamp(-90.0, 90.0),
            lon: normalize_lon(lon),
        }
    }
}

/// Haversine great-circle distance in kilometres.
pub fn gcd_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let dlat = (b.lat - a.lat).abs().to_radians();
    let dlon = (b.lon - a.lon).abs().to_radians();
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = s_lat * s_lat + a.lat.to_radians().cos() * b.lat.to_radians().cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Why a spherical mean could not be formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanError {
    EmptyPointSet,
    /// The 3D centroid is (numerically) the origin; the caller must pick a fallback.
    Degenerate,
}

/// Normalized 3D centroid of the points, mapped back to lat/lon.
pub fn chordal_mean(points: &[GeoCoord]) -> Result<GeoCoord, MeanError> {
    if points.is_empty() {
        return Err(MeanError::EmptyPointSet);
    }
    let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
    for p in points {
        let v = p.to_unit_vec();
        x += v.x;
        y += v.y;
        z += v.z;
    }
    let n = points.len() as f64;
    let (x, y, z) = (x / n, y / n, z / n);
    if (x * x + y * y + z * z).sqrt() < 1e-9 {
        return Err(MeanError::Degenerate);
    }
    Ok(UnitVec3::normalized(x, y, z)
        .ok_or(MeanError::Degenerate)?
        .to_coord())
}

/// Position on one face of the inscribed cube. `u`, `v` lie in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceUV {
    pub face: u8,
    pub u: f64,
    pub v: f64,
}

struct FaceFrame {
    normal: [f64; 3],
    eu: [f64; 3],
    ev: [f64; 3],
}

// Face 0 is centred on (0°, 0°), face 2 on the north pole.
const FACES: [FaceFrame; 6] = [
    FaceFrame {
        normal: [1.0, 0.0, 0.0],
        eu: [0.0, 1.0, 0.0],
        ev: [0.0, 0.0, 1.0],
    },
    FaceFrame {
        normal: [0.0, 1.0, 0.0],
        eu: [-1.0, 0.0, 0.0],
        ev: [0.0, 0.0, 1.0],
    },
    FaceFrame {
        normal: [0.0, 0.0, 1.0],
        eu: [0.0, 1.0, 0.0],
        ev: [-1.0, 0.0, 0.0],
    },
    FaceFrame {
        normal: [-1.0, 0.0, 0.0],
        eu: [0.0, -1.0, 0.0],
        ev: [0.0, 0.0, 1.0],
    },
    FaceFrame {
        normal: [0.0, -1.0, 0.0],
        eu: [1.0, 0.0, 0.0],
        ev: [0.0, 0.0, 1.0],
    },
    FaceFrame {
        normal: [0.0, 0.0, -1.0],
        eu: [0.0, 1.0, 0.0],
        ev: [1.0, 0.0, 0.0],
    },
];

fn dot3(a: &[f64; 3], v: &UnitVec3) -> f64 {
    a[0] * v.x + a[1] * v.y + a[2] * v.z
}

/// Gnomonic projection onto the cube face the point is closest to.
/// A point on an edge shared by several faces goes to the lowest face id.
pub fn project_to_face(c: GeoCoord) -> FaceUV {
    let p = c.to_unit_vec();
    let mut face = 0;
    let mut best = dot3(&FACES[0].normal, &p);
    for (i, f) in FACES.iter().enumerate().skip(1) {
        let d = dot3(&f.normal, &p);
        if d > best {
            best = d;
            face = i;
        }
    }
    let frame = &FACES[face];
    let s = dot3(&frame.eu, &p) / best;
    let t = dot3(&frame.ev, &p) / best;
    FaceUV {
        face: face as u8,
        u: ((s + 1.0) / 2.0).clamp(0.0, BELOW_ONE),
        v: ((t + 1.0) / 2.0).clamp(0.0, BELOW_ONE),
    }
}

/// Inverse of [`project_to_face`] for any `(u, v)` in `[0, 1]²`.
pub fn unproject(f: FaceUV) -> GeoCoord {
    let frame = &FACES[f.face as usize];
    let (s, t) = (2.0 * f.u - 1.0, 2.0 * f.v - 1.0);
    let comp = |k: usize| frame.normal[k] + s * frame.eu[k] + t * frame.ev[k];
    UnitVec3::normalized(comp(0), comp(1), comp(2))
        .expect("cube surface point is never the origin")
        .to_coord()
}

/// Centre of the depth-`depth` face cell with integer coordinates `(i, j)`.
pub fn face_center(face: u8, depth: u8, i: u32, j: u32) -> GeoCoord {
    let size = (1u64 << depth) as f64;
    unproject(FaceUV {
        face,
        u: (i as f64 + 0.5) / size,
        v: (j as f64 + 0.5) / size,
    })
}
