use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GridSpec, RawTrajectory};

pub const MIN_POINTS: usize = 20;
pub const MAX_POINTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooLong,
    OutOfBox,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub retained: usize,
    pub rejected: BTreeMap<String, RejectReason>,
}

impl FilterReport {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejected.values().filter(|&&r| r == reason).count()
    }
}

/// Keeps trajectories with `min_len..=max_len` points that lie entirely
/// inside the grid's bounding box.
pub fn filter_trajectories(
    trajs: Vec<RawTrajectory>,
    min_len: usize,
    max_len: usize,
    spec: &GridSpec,
) -> (Vec<RawTrajectory>, FilterReport) {
    let mut report = FilterReport {
        input: trajs.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for t in trajs {
        let n = t.points.len();
        let reason = if n < min_len {
            Some(RejectReason::TooShort)
        } else if n > max_len {
            Some(RejectReason::TooLong)
        } else if !t.points.iter().all(|p| spec.contains(p.x, p.y)) {
            Some(RejectReason::OutOfBox)
        } else {
            None
        };
        match reason {
            Some(r) => {
                report.rejected.insert(t.id.clone(), r);
            }
            None => kept.push(t),
        }
    }
    report.retained = kept.len();
    (kept, report)
}
