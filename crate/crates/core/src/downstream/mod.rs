//! Frozen-encoder representations and the evaluation protocols: trajectory
//! similarity search, travel time estimation and destination prediction.

mod dp;
mod geojson;
mod head;
mod io;
mod ts;
mod tte;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{RoadToken, TrajectoryRecord};
use crate::encoder::{BranchBatch, TigrModel};
use crate::error::Result;
use crate::numerics::Real;
use crate::spatiotemporal::TrafficFeatures;

pub use dp::{destination_prefix, dp_run, prefix_len, DpMetrics, DpOutcome};
pub use geojson::{export_similar_geojson, road_linestring, similar_geojson};
pub use head::{HeadConfig, HeadModel, HeadTask};
pub use io::{read_embeddings, write_embeddings, write_metrics, write_sweep_csv, MetricsReport, SweepRow, EMBEDDING_MAGIC};
pub use ts::{odd_even, split_halves, ts_build, ts_evaluate, ts_metrics, ts_ranks, ts_scores, TsInstance, TsMetrics};
pub use tte::{travel_time, tte_fit_predict, tte_labels, tte_run, TteMetrics, TteOutcome};

/// Final embedding of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRepresentation {
    pub id: String,
    pub z: Vec<f32>,
}

/// Trajectories encoded per call of the model.
pub const ENCODE_CHUNK: usize = 256;

/// Every road token stamped with the trajectory's start time, so that
/// only the departure time is visible to the encoder.
pub fn start_time_only(rec: &TrajectoryRecord) -> TrajectoryRecord {
    let mut r = rec.clone();
    if let Some(t0) = r.road.tokens.first().map(|t| t.t) {
        r.road.tokens = r.road.tokens.iter().map(|t| RoadToken { segment: t.segment, t: t0 }).collect();
    }
    if let Some(t0) = r.grid.tokens.first().map(|t| t.t) {
        r.grid.tokens.iter_mut().for_each(|t| t.t = t0);
    }
    r
}

/// Encodes trajectories with the anchor encoders: no masking, no dropout,
/// no projection.
pub fn encode_records<T: Real>(
    model: &TigrModel<T>,
    records: &[&TrajectoryRecord],
    feats: Option<&TrafficFeatures>,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(ENCODE_CHUNK) {
        let mut grid = BranchBatch::default();
        let mut road = BranchBatch::default();
        for r in chunk {
            let gt: Vec<_> = r.grid.tokens.iter().map(|t| t.t).collect();
            grid.push(&r.grid.cells(), &gt);
            road.push(&r.road.segments(), &r.road.times());
        }
        let z = model.embed(&grid, &road, feats)?;
        out.extend((0..z.rows()).map(|i| z.row(i).iter().map(|v| v.as_f64() as f32).collect()));
    }
    Ok(out)
}

pub fn encode_trajectory<T: Real>(
    model: &TigrModel<T>,
    record: &TrajectoryRecord,
    feats: Option<&TrafficFeatures>,
) -> Result<TrajectoryRepresentation> {
    let z = encode_records(model, &[record], feats)?.remove(0);
    Ok(TrajectoryRepresentation { id: record.id.clone(), z })
}

/// Named metric values, ordered by name.
pub type Metrics = BTreeMap<String, f64>;
