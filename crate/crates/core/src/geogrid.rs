//! Grid-cell classing of UTM positions and the positive-match radius test.
//!
//! All points are assumed to share one UTM zone, so distances are plain
//! Euclidean distances in meters.

use crate::error::{Error, Result};

/// Default positive-match radius in meters.
pub const DEFAULT_RADIUS_M: f64 = 25.0;

/// Default grid cell size in meters.
pub const DEFAULT_CELL_SIZE_M: f64 = 10.0;

/// A planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UtmPoint {
    pub east: f64,
    pub north: f64,
}

impl UtmPoint {
    pub fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }
}

/// Index of an `M`×`M` grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub e: i64,
    pub n: i64,
}

impl CellId {
    pub fn new(e: i64, n: i64) -> Self {
        Self { e, n }
    }
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.e, self.n)
    }
}

/// Maps a point to its grid cell: `(floor(east / M), floor(north / M))`.
///
/// Uses mathematical floor, so `-0.1` with `M = 10` lands in cell `-1`.
pub fn grid_cell(p: UtmPoint, cell_size: f64) -> Result<CellId> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::Parameter(format!(
            "cell size must be positive and finite, got {cell_size}"
        )));
    }
    if !p.east.is_finite() || !p.north.is_finite() {
        return Err(Error::Parameter(format!("non-finite point {p:?}")));
    }
    Ok(CellId {
        e: (p.east / cell_size).floor() as i64,
        n: (p.north / cell_size).floor() as i64,
    })
}

pub fn distance_m(a: UtmPoint, b: UtmPoint) -> f64 {
    (a.east - b.east).hypot(a.north - b.north)
}

/// True iff `query` and `reference` are within `radius` meters (inclusive).
pub fn is_positive(query: UtmPoint, reference: UtmPoint, radius: f64) -> Result<bool> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!(
            "radius must be positive, got {radius}"
        )));
    }
    Ok(distance_m(query, reference) <= radius)
}
