//! Great-circle distance and hexagonal cell indexing.
//!
//! The default index tiles a local azimuthal-equidistant projection with
//! flat-topped hexagons whose area matches the mean hexagon area of the
//! H3 resolution being emulated (5.16 km² at resolution 7). Cells are
//! addressed by axial coordinates `(q, r)`; every cell has exactly six
//! neighbors. Anything implementing [`SpatialIndex`] can replace it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius (IUGG), kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Mean H3 hexagon area in km² for resolutions 0 through 15.
const H3_MEAN_HEX_AREA_KM2: [f64; 16] = [
    4_357_449.416_078_383,
    609_788.441_794_133_3,
    86_801.780_398_997_5,
    12_393.434_655_088_2,
    1_770.347_654_491_307,
    252.903_364_636_036_1,
    36.129_062_164_412_8,
    5.161_293_359_717_191,
    0.737_327_598_245_307_3,
    0.105_332_513_036_782_6,
    0.015_047_501_900_564_1,
    0.002_149_643_129_451_7,
    0.000_307_091_875_631_5,
    0.000_043_870_267_947_8,
    0.000_006_267_181_135_1,
    0.000_000_895_311_590_7,
];

/// Resolutions whose cells are small enough for a single local projection.
pub const SUPPORTED_RESOLUTIONS: std::ops::RangeInclusive<u8> = 5..=15;

pub const DEFAULT_RESOLUTION: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::Domain(format!("point ({latitude}, {longitude}) out of range")));
        }
        Ok(Self { latitude, longitude })
    }
}

/// Central angle between two points, radians.
fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.longitude - a.longitude).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Haversine great-circle distance in kilometers.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    EARTH_RADIUS_KM * central_angle(a, b)
}

/// Identifier of one hexagonal cell. The string form is
/// `hex<res>:q=<q>:r=<r>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellId {
    pub resolution: u8,
    pub q: i64,
    pub r: i64,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hex{}:q={}:r={}", self.resolution, self.q, self.r)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("malformed cell id {s:?}"));
        let rest = s.strip_prefix("hex").ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let resolution = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let q = parts
            .next()
            .and_then(|p| p.strip_prefix("q="))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let r = parts
            .next()
            .and_then(|p| p.strip_prefix("r="))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(CellId { resolution, q, r })
    }
}

/// Axial offsets of the six one-ring neighbors.
const AXIAL_DIRECTIONS: [(i64, i64); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// A point → cell assignment with one-ring adjacency.
pub trait SpatialIndex: Send + Sync {
    fn cell_of(&self, p: GeoPoint) -> Result<CellId>;

    /// Cells sharing an edge with `cell`, never `cell` itself; at most six.
    fn neighbors(&self, cell: CellId) -> Vec<CellId>;

    /// Short description recorded in graph metadata.
    fn describe(&self) -> String;
}

/// Planar hexagonal tiling over an azimuthal-equidistant projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexGrid {
    origin: GeoPoint,
    resolution: u8,
    /// Hexagon circumradius (center to vertex), km.
    size_km: f64,
}

impl HexGrid {
    pub fn new(origin: GeoPoint, resolution: u8) -> Result<Self> {
        if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
            return Err(Error::Config(format!(
                "resolution {resolution} unsupported (expected {}..={})",
                SUPPORTED_RESOLUTIONS.start(),
                SUPPORTED_RESOLUTIONS.end()
            )));
        }
        let area = H3_MEAN_HEX_AREA_KM2[resolution as usize];
        let size_km = (2.0 * area / (3.0 * 3f64.sqrt())).sqrt();
        Ok(Self {
            origin,
            resolution,
            size_km,
        })
    }

    /// Grid centered on the mean coordinate of `points`.
    pub fn centered_on(points: &[GeoPoint], resolution: u8) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("cannot center a grid on zero points".into()));
        }
        let n = points.len() as f64;
        let lat = points.iter().map(|p| p.latitude).sum::<f64>() / n;
        let lon = points.iter().map(|p| p.longitude).sum::<f64>() / n;
        Self::new(GeoPoint::new(lat, lon)?, resolution)
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn resolution(&self) -> u8 {
        self.resolution
    }

    pub fn cell_area_km2(&self) -> f64 {
        1.5 * 3f64.sqrt() * self.size_km * self.size_km
    }

    /// Distance between opposite edges of a cell, km.
    pub fn cell_width_km(&self) -> f64 {
        3f64.sqrt() * self.size_km
    }

    /// Azimuthal-equidistant projection about the origin: (east, north) km.
    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        let (phi0, lam0) = (self.origin.latitude.to_radians(), self.origin.longitude.to_radians());
        let (phi, lam) = (p.latitude.to_radians(), p.longitude.to_radians());
        let c = central_angle(self.origin, p);
        let k = if c < 1e-12 { 1.0 } else { c / c.sin() };
        let dlam = lam - lam0;
        let x = EARTH_RADIUS_KM * k * phi.cos() * dlam.sin();
        let y = EARTH_RADIUS_KM * k * (phi0.cos() * phi.sin() - phi0.sin() * phi.cos() * dlam.cos());
        (x, y)
    }

    /// Projected center of a cell, km.
    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        let (q, r) = (cell.q as f64, cell.r as f64);
        (self.size_km * 1.5 * q, self.size_km * 3f64.sqrt() * (r + q / 2.0))
    }

    fn axial_round(q: f64, r: f64) -> (i64, i64) {
        let s = -q - r;
        let (mut rq, mut rr, rs) = (q.round(), r.round(), s.round());
        let (dq, dr, ds) = ((rq - q).abs(), (rr - r).abs(), (rs - s).abs());
        if dq > dr && dq > ds {
            rq = -rr - rs;
        } else if dr > ds {
            rr = -rq - rs;
        }
        (rq as i64, rr as i64)
    }
}

impl SpatialIndex for HexGrid {
    fn cell_of(&self, p: GeoPoint) -> Result<CellId> {
        GeoPoint::new(p.latitude, p.longitude)?;
        let (x, y) = self.project(p);
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Domain(format!(
                "point ({}, {}) cannot be projected",
                p.latitude, p.longitude
            )));
        }
        let q = (2.0 / 3.0) * x / self.size_km;
        let r = (-x / 3.0 + 3f64.sqrt() / 3.0 * y) / self.size_km;
        let (q, r) = Self::axial_round(q, r);
        Ok(CellId {
            resolution: self.resolution,
            q,
            r,
        })
    }

    fn neighbors(&self, cell: CellId) -> Vec<CellId> {
        AXIAL_DIRECTIONS
            .iter()
            .map(|(dq, dr)| CellId {
                resolution: cell.resolution,
                q: cell.q + dq,
                r: cell.r + dr,
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!(
            "planar-hex res={} origin=({:?},{:?})",
            self.resolution, self.origin.latitude, self.origin.longitude
        )
    }
}

/// Hex distance between two axial cells (0 = same cell, 1 = one-ring).
pub fn grid_distance(a: CellId, b: CellId) -> i64 {
    let dq = a.q - b.q;
    let dr = a.r - b.r;
    (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
}
