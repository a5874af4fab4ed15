use serde::Serialize;

use super::encode_records;
use crate::data::{GridToken, GridTrajectory, RawTrajectory, RoadTrajectory, Timestamp, TrajectoryRecord};
use crate::encoder::TigrModel;
use crate::error::{Result, TigrError};
use crate::numerics::{Real, Rng};
use crate::spatiotemporal::TrafficFeatures;

/// Items at 1-based odd positions (1st, 3rd, …) and at even positions.
pub fn odd_even<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let odd = items.iter().step_by(2).cloned().collect();
    let even = items.iter().skip(1).step_by(2).cloned().collect();
    (odd, even)
}

/// Index of the last token whose time is at or before `t`.
fn token_at<T>(tokens: &[T], time: impl Fn(&T) -> Timestamp, t: Timestamp) -> usize {
    tokens.partition_point(|k| time(k) <= t).saturating_sub(1)
}

/// Odd and even sub-trajectories.
///
/// The raw points are split by position. Each half's grid sequence is the
/// run-collapsed cells visited by its points, and its road sequence is the
/// stretch of the route from the segment under its first point to the
/// segment under its last point. Records without raw points split their
/// token sequences directly.
pub fn split_halves(rec: &TrajectoryRecord) -> (TrajectoryRecord, TrajectoryRecord) {
    if rec.raw.points.len() < 2 {
        let (go, ge) = odd_even(&rec.grid.tokens);
        let (ro, re) = odd_even(&rec.road.tokens);
        let make = |grid: Vec<GridToken>, road, raw| TrajectoryRecord {
            id: rec.id.clone(),
            raw,
            grid: GridTrajectory { id: rec.id.clone(), tokens: grid },
            road: RoadTrajectory { id: rec.id.clone(), tokens: road },
        };
        let empty = RawTrajectory { id: rec.id.clone(), points: Vec::new() };
        return (make(go, ro, empty.clone()), make(ge, re, empty));
    }
    let (po, pe) = odd_even(&rec.raw.points);
    let half = |points: Vec<crate::data::RawPoint>| {
        let mut grid: Vec<GridToken> = Vec::new();
        for p in &points {
            let cell = rec.grid.tokens[token_at(&rec.grid.tokens, |k| k.t, p.t)].cell;
            if grid.last().map(|g| g.cell) != Some(cell) {
                grid.push(GridToken { cell, t: p.t });
            }
        }
        let first = token_at(&rec.road.tokens, |k| k.t, points[0].t);
        let last = token_at(&rec.road.tokens, |k| k.t, points[points.len() - 1].t);
        TrajectoryRecord {
            id: rec.id.clone(),
            raw: RawTrajectory { id: rec.id.clone(), points },
            grid: GridTrajectory { id: rec.id.clone(), tokens: grid },
            road: RoadTrajectory {
                id: rec.id.clone(),
                tokens: rec.road.tokens[first..=last.max(first)].to_vec(),
            },
        }
    };
    (half(po), half(pe))
}

/// Query set, database and ground truth for similarity search.
#[derive(Clone, Debug)]
pub struct TsInstance {
    /// Odd halves.
    pub queries: Vec<TrajectoryRecord>,
    /// Even halves of the queries (entry `i` belongs to query `i`) followed
    /// by the even halves of the distractors.
    pub database: Vec<TrajectoryRecord>,
    pub truth: Vec<usize>,
}

impl TsInstance {
    pub fn k_neg(&self) -> usize {
        self.database.len() - self.queries.len()
    }
}

/// Samples `queries` evaluation trajectories and `k_neg` distractors,
/// all distinct, from `records`.
pub fn ts_build(records: &[TrajectoryRecord], queries: usize, k_neg: usize, rng: &mut Rng) -> Result<TsInstance> {
    if queries == 0 {
        return Err(TigrError::config("eval.queries", "must be positive"));
    }
    if queries + k_neg > records.len() {
        return Err(TigrError::Data(format!(
            "similarity search needs {queries} queries + {k_neg} distractors = {} trajectories, only {} available",
            queries + k_neg,
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    rng.shuffle(&mut order);
    let mut q = Vec::with_capacity(queries);
    let mut db = Vec::with_capacity(queries + k_neg);
    for &i in &order[..queries] {
        let (odd, even) = split_halves(&records[i]);
        q.push(odd);
        db.push(even);
    }
    for &i in &order[queries..queries + k_neg] {
        db.push(split_halves(&records[i]).1);
    }
    Ok(TsInstance {
        queries: q,
        database: db,
        truth: (0..queries).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TsMetrics {
    pub mr: f64,
    pub hr1: f64,
    pub hr5: f64,
}

/// Rank of the true entry for each query by dot-product similarity
/// (1 = best; equal similarities are ordered by database index).
pub fn ts_ranks(queries: &[Vec<f32>], database: &[Vec<f32>], truth: &[usize]) -> Vec<usize> {
    queries
        .iter()
        .zip(truth)
        .map(|(q, &t)| {
            let s = ts_scores(q, database);
            1 + s.iter().enumerate().filter(|&(j, &sj)| sj > s[t] || (sj == s[t] && j < t)).count()
        })
        .collect()
}

/// Dot-product similarity of one query against every database entry.
pub fn ts_scores(query: &[f32], database: &[Vec<f32>]) -> Vec<f64> {
    database
        .iter()
        .map(|d| query.iter().zip(d).map(|(&x, &y)| x as f64 * y as f64).sum())
        .collect()
}

pub fn ts_metrics(queries: &[Vec<f32>], database: &[Vec<f32>], truth: &[usize]) -> TsMetrics {
    let ranks = ts_ranks(queries, database, truth);
    let n = ranks.len().max(1) as f64;
    let hr = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    TsMetrics {
        mr: ranks.iter().sum::<usize>() as f64 / n,
        hr1: hr(1),
        hr5: hr(5),
    }
}

/// Metrics at each distractor count in `k_negs`, using the first `k` of
/// the instance's distractors. One encoding pass serves all counts.
pub fn ts_evaluate<T: Real>(
    instance: &TsInstance,
    k_negs: &[usize],
    model: &TigrModel<T>,
    feats: Option<&TrafficFeatures>,
) -> Result<Vec<(usize, TsMetrics)>> {
    if let Some(&k) = k_negs.iter().find(|&&k| k > instance.k_neg()) {
        return Err(TigrError::Data(format!(
            "k_neg {k} exceeds the {} distractors in the instance",
            instance.k_neg()
        )));
    }
    let q = encode_records(model, &instance.queries.iter().collect::<Vec<_>>(), feats)?;
    let db = encode_records(model, &instance.database.iter().collect::<Vec<_>>(), feats)?;
    Ok(k_negs
        .iter()
        .map(|&k| (k, ts_metrics(&q, &db[..instance.queries.len() + k], &instance.truth)))
        .collect())
}
