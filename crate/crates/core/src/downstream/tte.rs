use serde::Serialize;

use super::{encode_records, start_time_only, HeadConfig, HeadModel, HeadTask};
use crate::data::TrajectoryRecord;
use crate::encoder::TigrModel;
use crate::error::{Result, TigrError};
use crate::numerics::{Real, Rng};
use crate::spatiotemporal::TrafficFeatures;

/// Travel time in seconds: last minus first raw timestamp, or the matched
/// route's duration when no raw points are attached.
pub fn travel_time(rec: &TrajectoryRecord) -> f64 {
    match (rec.raw.points.first(), rec.raw.points.last()) {
        (Some(a), Some(b)) if rec.raw.points.len() >= 2 => (b.t - a.t) as f64,
        _ => rec.road.duration() as f64,
    }
}

/// Indices and labels of the trajectories with positive travel time, plus
/// the number excluded.
pub fn tte_labels(records: &[TrajectoryRecord]) -> (Vec<usize>, Vec<f64>, usize) {
    let mut idx = Vec::new();
    let mut y = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let t = travel_time(r);
        if t > 0.0 {
            idx.push(i);
            y.push(t);
        }
    }
    let excluded = records.len() - idx.len();
    (idx, y, excluded)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TteMetrics {
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
}

impl TteMetrics {
    pub fn compute(pred: &[f64], y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let err = || pred.iter().zip(y);
        TteMetrics {
            mae: err().map(|(p, t)| (p - t).abs()).sum::<f64>() / n,
            mape: err().map(|(p, t)| (p - t).abs() / t.max(1.0)).sum::<f64>() / n,
            rmse: (err().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TteOutcome {
    pub metrics: TteMetrics,
    /// Constant prediction at the mean training label.
    pub baseline: TteMetrics,
    pub n_train: usize,
    pub n_test: usize,
    pub excluded: usize,
    pub history: Vec<f64>,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let m = v.clone().sum::<f64>() / n;
    let s = (v.map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if s > 1e-9 { s } else { 1.0 })
}

/// Per-column standardisation fitted on `fit`.
fn standardizer(fit: &[Vec<f32>]) -> impl Fn(&[Vec<f32>]) -> Vec<Vec<f32>> {
    let d = fit.first().map_or(0, Vec::len);
    let stats: Vec<(f64, f64)> = (0..d).map(|c| mean_std(fit.iter().map(move |r| r[c] as f64))).collect();
    move |x: &[Vec<f32>]| {
        x.iter()
            .map(|r| r.iter().zip(&stats).map(|(&v, &(m, s))| ((v as f64 - m) / s) as f32).collect())
            .collect()
    }
}

/// Trains a regression head on `(train_x, train_y)` and predicts seconds
/// for `test_x`. Inputs and labels are standardised with training
/// statistics.
pub fn tte_fit_predict(
    train_x: &[Vec<f32>],
    train_y: &[f64],
    test_x: &[Vec<f32>],
    cfg: &HeadConfig,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = train_x.first().map_or(0, Vec::len);
    let scale = standardizer(train_x);
    let (m, s) = mean_std(train_y.iter().copied());
    let ys: Vec<f64> = train_y.iter().map(|y| (y - m) / s).collect();
    let mut head = HeadModel::new(dim, HeadTask::Regression, cfg, rng)?;
    let history = head.fit_values(&scale(train_x), &ys, cfg, rng)?;
    let pred = head.predict(&scale(test_x))?.into_iter().map(|r| r[0] * s + m).collect();
    Ok((pred, history))
}

/// Travel time estimation on frozen embeddings computed with every
/// timestamp set to the departure time.
pub fn tte_run<T: Real>(
    model: &TigrModel<T>,
    train: &[TrajectoryRecord],
    test: &[TrajectoryRecord],
    feats: Option<&TrafficFeatures>,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<TteOutcome> {
    let (tr_idx, tr_y, ex_tr) = tte_labels(train);
    let (te_idx, te_y, ex_te) = tte_labels(test);
    if tr_idx.is_empty() || te_idx.is_empty() {
        return Err(TigrError::Data("travel time estimation needs trajectories with positive duration in both splits".into()));
    }
    let masked = |recs: &[TrajectoryRecord], idx: &[usize]| -> Vec<TrajectoryRecord> { idx.iter().map(|&i| start_time_only(&recs[i])).collect() };
    let tr = masked(train, &tr_idx);
    let te = masked(test, &te_idx);
    let tr_x = encode_records(model, &tr.iter().collect::<Vec<_>>(), feats)?;
    let te_x = encode_records(model, &te.iter().collect::<Vec<_>>(), feats)?;
    let (pred, history) = tte_fit_predict(&tr_x, &tr_y, &te_x, cfg, &mut Rng::new(seed))?;
    let mean = tr_y.iter().sum::<f64>() / tr_y.len() as f64;
    Ok(TteOutcome {
        metrics: TteMetrics::compute(&pred, &te_y),
        baseline: TteMetrics::compute(&vec![mean; te_y.len()], &te_y),
        n_train: tr_y.len(),
        n_test: te_y.len(),
        excluded: ex_tr + ex_te,
        history,
    })
}
