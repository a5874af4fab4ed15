//! Spatio-temporal branch: transition probabilities, hourly traffic speeds,
//! traffic-weighted graph convolution, cosine time embedding and local
//! multi-head attention fusion.

mod layers;
mod traffic;
mod transition;

pub use layers::{
    fuse_st, local_multi_head_attention, time_embed, traffic_gcn, LmaParams, StParams, TimeEmbeddingParams,
    TrafficFeatures, TrafficGcnParams, GCN_FEATURES,
};
pub use traffic::{TrafficMatrix, HOURS};
pub use transition::TransitionMatrix;

use crate::data::Timestamp;

/// Unix time of Monday 1970-01-05 00:00 UTC.
const FIRST_MONDAY: i64 = 4 * 86_400;
const WEEK: i64 = 7 * 86_400;

/// UTC hour of day in `0..24`.
pub fn hour_of_day(t: Timestamp) -> usize {
    (t.rem_euclid(86_400) / 3600) as usize
}

/// Days since the start of the ISO week (Monday 00:00 UTC), in `[0, 7)`.
pub fn week_days(t: Timestamp) -> f64 {
    (t - FIRST_MONDAY).rem_euclid(WEEK) as f64 / 86_400.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_helpers() {
        // 2024-01-01 is a Monday
        assert_eq!(week_days(1_704_067_200), 0.0);
        assert_eq!(week_days(1_704_067_200 + 36 * 3600), 1.5);
        assert_eq!(hour_of_day(1_704_067_200 + 30 * 3600), 6);
        assert_eq!(week_days(1_704_067_200 - 21_600), 6.75);
    }
}
