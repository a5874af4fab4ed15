//! Trajectory and road-network data model, ingestion, grid discretisation,
//! filtering, splitting and the synthetic lattice generator.

mod filter;
mod grid;
pub mod io;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};

pub use filter::{filter_trajectories, FilterReport, RejectReason, MAX_POINTS, MIN_POINTS};
pub use grid::{map_to_grid, GridSpec, METERS_PER_DEGREE};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{hour_factor, synth_generate, SynthConfig, SynthDataset};

/// Unix seconds.
pub type Timestamp = i64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPoint {
    /// Longitude, degrees.
    pub x: f64,
    /// Latitude, degrees.
    pub y: f64,
    pub t: Timestamp,
}

/// A coordinate trajectory: at least two points with strictly increasing
/// timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub id: String,
    pub points: Vec<RawPoint>,
}

impl RawTrajectory {
    pub fn new(id: impl Into<String>, points: Vec<RawPoint>) -> Result<Self> {
        let id = id.into();
        if points.len() < 2 {
            return Err(TigrError::Data(format!("trajectory {id}: fewer than 2 points")));
        }
        if points.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(TigrError::Data(format!("trajectory {id}: timestamps not strictly increasing")));
        }
        Ok(RawTrajectory { id, points })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridToken {
    pub cell: usize,
    pub t: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTrajectory {
    pub id: String,
    pub tokens: Vec<GridToken>,
}

impl GridTrajectory {
    pub fn cells(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.cell).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoadToken {
    pub segment: usize,
    pub t: Timestamp,
}

/// A map-matched trajectory. Consecutive segments are adjacent in the
/// network it was validated against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoadTrajectory {
    pub id: String,
    pub tokens: Vec<RoadToken>,
}

impl RoadTrajectory {
    pub fn segments(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.segment).collect()
    }

    pub fn times(&self) -> Vec<Timestamp> {
        self.tokens.iter().map(|t| t.t).collect()
    }

    pub fn duration(&self) -> Timestamp {
        match (self.tokens.first(), self.tokens.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

/// Highway classes in feature-column order; unknown strings map to `other`.
pub const ROAD_CLASSES: [&str; 7] = [
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "residential",
    "other",
];

pub fn class_index(class: &str) -> Option<usize> {
    ROAD_CLASSES.iter().position(|c| c.eq_ignore_ascii_case(class))
}

/// Number of static feature columns: length, speed limit, one-hot class.
pub const SEGMENT_FEATURES: usize = 2 + ROAD_CLASSES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub external_id: String,
    pub length_m: f64,
    pub speed_kmh: f64,
    pub class: usize,
    /// `(lon, lat)` vertices.
    pub geometry: Vec<(f64, f64)>,
}

/// Directed road-segment graph with static features.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub segments: Vec<Segment>,
    /// Sorted successor ids per segment.
    pub adjacency: Vec<Vec<usize>>,
}

impl RoadNetwork {
    pub fn new(segments: Vec<Segment>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = segments.len();
        if n == 0 {
            return Err(TigrError::Data("road network without segments".into()));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(TigrError::Data(format!("edge {a}->{b} references a missing segment")));
            }
            adjacency[a].push(b);
        }
        for succ in &mut adjacency {
            succ.sort_unstable();
            succ.dedup();
        }
        for s in &segments {
            if !(s.length_m.is_finite() && s.speed_kmh.is_finite()) || s.length_m <= 0.0 || s.speed_kmh <= 0.0 {
                return Err(TigrError::Data(format!("segment {}: non-positive length or speed", s.external_id)));
            }
        }
        Ok(RoadNetwork { segments, adjacency })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, succ)| succ.iter().map(move |&b| (a, b)))
    }

    /// Feature row `[length_m, speed_kmh, one-hot class…]`.
    pub fn features(&self, v: usize) -> [f64; SEGMENT_FEATURES] {
        let s = &self.segments[v];
        let mut row = [0.0; SEGMENT_FEATURES];
        row[0] = s.length_m;
        row[1] = s.speed_kmh;
        row[2 + s.class] = 1.0;
        row
    }

    /// Checks that consecutive tokens are adjacent and ids are in range.
    pub fn validate(&self, traj: &RoadTrajectory) -> Result<()> {
        for tok in &traj.tokens {
            if tok.segment >= self.len() {
                return Err(TigrError::Data(format!(
                    "trajectory {}: unknown segment {}",
                    traj.id, tok.segment
                )));
            }
        }
        for w in traj.tokens.windows(2) {
            if w[1].t < w[0].t {
                return Err(TigrError::Data(format!("trajectory {}: timestamps decrease", traj.id)));
            }
            if !self.is_adjacent(w[0].segment, w[1].segment) {
                return Err(TigrError::Data(format!(
                    "trajectory {}: segments {} -> {} are not adjacent",
                    traj.id, w[0].segment, w[1].segment
                )));
            }
        }
        Ok(())
    }
}

/// One trajectory in all three representations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub id: String,
    pub raw: RawTrajectory,
    pub grid: GridTrajectory,
    pub road: RoadTrajectory,
}
