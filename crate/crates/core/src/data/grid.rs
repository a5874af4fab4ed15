use serde::{Deserialize, Serialize};

use super::{GridToken, GridTrajectory, RawTrajectory};
use crate::error::{Result, TigrError};

/// Meters per degree of latitude on a sphere of mean Earth radius.
pub const METERS_PER_DEGREE: f64 = 6_371_008.8 * std::f64::consts::PI / 180.0;

/// Regular partition of a lon/lat bounding box into square cells.
///
/// Distances use an equirectangular projection with the longitude scale
/// fixed at the box-centre latitude. Row `m` counts northwards, column `n`
/// eastwards, both 1-based; the flat id is `(m−1)·N + (n−1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub cell_size_m: f64,
    /// Row count `M`.
    pub rows: usize,
    /// Column count `N`.
    pub cols: usize,
}

impl GridSpec {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64, cell_size_m: f64) -> Result<Self> {
        if !(max_x > min_x && max_y > min_y) {
            return Err(TigrError::config("grid", "bounding box has no area"));
        }
        if !(cell_size_m > 0.0) {
            return Err(TigrError::config("grid.cell_size_m", "must be positive"));
        }
        let mut spec = GridSpec {
            min_x,
            min_y,
            max_x,
            max_y,
            cell_size_m,
            rows: 1,
            cols: 1,
        };
        let (w, h) = spec.extent_m();
        let count = |len: f64| ((len / cell_size_m) - 1e-9).ceil().max(1.0) as usize;
        spec.cols = count(w);
        spec.rows = count(h);
        Ok(spec)
    }

    /// Box whose south-west corner is `(lon, lat)` and whose extent is given in meters.
    pub fn from_meters(lon: f64, lat: f64, width_m: f64, height_m: f64, cell_size_m: f64) -> Result<Self> {
        let dlat = height_m / METERS_PER_DEGREE;
        let lat_c = lat + dlat / 2.0;
        let dlon = width_m / (METERS_PER_DEGREE * lat_c.to_radians().cos());
        Self::new(lon, lat, lon + dlon, lat + dlat, cell_size_m)
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn lon_scale(&self) -> f64 {
        METERS_PER_DEGREE * ((self.min_y + self.max_y) / 2.0).to_radians().cos()
    }

    pub fn extent_m(&self) -> (f64, f64) {
        (
            (self.max_x - self.min_x) * self.lon_scale(),
            (self.max_y - self.min_y) * METERS_PER_DEGREE,
        )
    }

    /// Offsets in meters east and north of the south-west corner.
    pub fn to_meters(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.min_x) * self.lon_scale(), (y - self.min_y) * METERS_PER_DEGREE)
    }

    pub fn from_meters_offset(&self, east: f64, north: f64) -> (f64, f64) {
        (self.min_x + east / self.lon_scale(), self.min_y + north / METERS_PER_DEGREE)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.min_x..=self.max_x).contains(&x) && (self.min_y..=self.max_y).contains(&y)
    }

    /// 1-based `(m, n)` of the cell holding the point, if inside the box.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let (east, north) = self.to_meters(x, y);
        let n = ((east / self.cell_size_m).floor() as usize).min(self.cols - 1) + 1;
        let m = ((north / self.cell_size_m).floor() as usize).min(self.rows - 1) + 1;
        Some((m, n))
    }

    pub fn flat_id(&self, m: usize, n: usize) -> usize {
        (m - 1) * self.cols + (n - 1)
    }

    pub fn cell_index(&self, flat: usize) -> (usize, usize) {
        (flat / self.cols + 1, flat % self.cols + 1)
    }

    /// Centre of a cell in lon/lat.
    pub fn cell_center(&self, flat: usize) -> (f64, f64) {
        let (m, n) = self.cell_index(flat);
        self.from_meters_offset(
            (n as f64 - 0.5) * self.cell_size_m,
            (m as f64 - 0.5) * self.cell_size_m,
        )
    }
}

/// Maps in-box points to cells, drops out-of-box points and collapses runs
/// of the same cell to their first timestamp. `None` when no point is in
/// the box.
pub fn map_to_grid(traj: &RawTrajectory, spec: &GridSpec) -> Option<GridTrajectory> {
    let mut tokens: Vec<GridToken> = Vec::new();
    for p in &traj.points {
        let Some((m, n)) = spec.cell_of(p.x, p.y) else { continue };
        let cell = spec.flat_id(m, n);
        if tokens.last().is_some_and(|last| last.cell == cell) {
            continue;
        }
        tokens.push(GridToken { cell, t: p.t });
    }
    (!tokens.is_empty()).then(|| GridTrajectory {
        id: traj.id.clone(),
        tokens,
    })
}
