use std::collections::BTreeMap;

use serde::Serialize;

use super::{encode_records, HeadConfig, HeadModel, HeadTask};
use crate::data::{GridTrajectory, RawTrajectory, RoadTrajectory, TrajectoryRecord};
use crate::encoder::TigrModel;
use crate::error::{Result, TigrError};
use crate::numerics::{Real, Rng};
use crate::spatiotemporal::TrafficFeatures;

/// Number of road tokens kept: `ceil(0.9·L)`, but never the whole route.
pub fn prefix_len(len: usize) -> usize {
    ((9 * len).div_ceil(10)).min(len.saturating_sub(1))
}

/// The observed prefix of a trajectory and its destination segment, or
/// `None` for routes shorter than two segments.
///
/// Grid tokens and raw points are cut at the time the first dropped road
/// segment is entered.
pub fn destination_prefix(rec: &TrajectoryRecord) -> Option<(TrajectoryRecord, usize)> {
    let len = rec.road.tokens.len();
    if len < 2 {
        return None;
    }
    let k = prefix_len(len);
    let cut = rec.road.tokens[k].t;
    let mut grid: Vec<_> = rec.grid.tokens.iter().filter(|t| t.t < cut).copied().collect();
    if grid.is_empty() {
        grid = rec.grid.tokens.iter().take(1).copied().collect();
    }
    let prefix = TrajectoryRecord {
        id: rec.id.clone(),
        raw: RawTrajectory {
            id: rec.id.clone(),
            points: rec.raw.points.iter().filter(|p| p.t < cut).copied().collect(),
        },
        grid: GridTrajectory { id: rec.id.clone(), tokens: grid },
        road: RoadTrajectory {
            id: rec.id.clone(),
            tokens: rec.road.tokens[..k].to_vec(),
        },
    };
    Some((prefix, rec.road.tokens[len - 1].segment))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DpMetrics {
    pub acc1: f64,
    pub acc5: f64,
    pub f1: f64,
}

/// Classes in descending score order, ties by class id.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

impl DpMetrics {
    /// Metrics from per-example class rankings (best first).
    pub fn compute(rankings: &[Vec<usize>], labels: &[usize]) -> Self {
        let n = labels.len().max(1) as f64;
        let hit = |k: usize| {
            rankings
                .iter()
                .zip(labels)
                .filter(|(r, y)| r.iter().take(k).any(|c| c == *y))
                .count() as f64
                / n
        };
        // per class: true positives, predicted count, actual count
        let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
        for &y in labels {
            counts.entry(y).or_default().2 += 1;
        }
        for (r, &y) in rankings.iter().zip(labels) {
            let p = r[0];
            if let Some(e) = counts.get_mut(&p) {
                e.1 += 1;
                if p == y {
                    e.0 += 1;
                }
            }
        }
        let f1 = counts
            .values()
            .map(|&(tp, pred, actual)| 2.0 * tp as f64 / (pred + actual) as f64)
            .sum::<f64>()
            / counts.len().max(1) as f64;
        DpMetrics {
            acc1: hit(1),
            acc5: hit(5),
            f1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DpOutcome {
    pub metrics: DpMetrics,
    /// Most frequent training destinations, in frequency order.
    pub baseline: DpMetrics,
    pub n_train: usize,
    pub n_test: usize,
    pub excluded: usize,
    pub history: Vec<f64>,
}

fn prefixes(records: &[TrajectoryRecord]) -> (Vec<TrajectoryRecord>, Vec<usize>, usize) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in records {
        if let Some((p, y)) = destination_prefix(r) {
            xs.push(p);
            ys.push(y);
        }
    }
    let excluded = records.len() - xs.len();
    (xs, ys, excluded)
}

/// Destination prediction: a segment classifier over frozen embeddings of
/// the 90% prefixes.
pub fn dp_run<T: Real>(
    model: &TigrModel<T>,
    train: &[TrajectoryRecord],
    test: &[TrajectoryRecord],
    feats: Option<&TrafficFeatures>,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<DpOutcome> {
    let (tr, tr_y, ex_tr) = prefixes(train);
    let (te, te_y, ex_te) = prefixes(test);
    if tr.is_empty() || te.is_empty() {
        return Err(TigrError::Data("destination prediction needs routes of at least two segments in both splits".into()));
    }
    let classes = model.spec.n_segments;
    let tr_x = encode_records(model, &tr.iter().collect::<Vec<_>>(), feats)?;
    let te_x = encode_records(model, &te.iter().collect::<Vec<_>>(), feats)?;
    let mut rng = Rng::new(seed);
    let mut head = HeadModel::new(tr_x[0].len(), HeadTask::Classes(classes), cfg, &mut rng)?;
    let history = head.fit_classes(&tr_x, &tr_y, cfg, &mut rng)?;
    let rankings: Vec<Vec<usize>> = head.predict(&te_x)?.iter().map(|s| ranked(s)).collect();

    let mut freq = vec![0.0; classes];
    for &y in &tr_y {
        freq[y] += 1.0;
    }
    let majority = ranked(&freq);
    Ok(DpOutcome {
        metrics: DpMetrics::compute(&rankings, &te_y),
        baseline: DpMetrics::compute(&vec![majority; te_y.len()], &te_y),
        n_train: tr_y.len(),
        n_test: te_y.len(),
        excluded: ex_tr + ex_te,
        history,
    })
}
