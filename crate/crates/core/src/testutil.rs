//! Fixtures shared by unit tests.

use crate::data::{RoadNetwork, Segment};
use crate::numerics::Rng;
use crate::spatiotemporal::{TrafficFeatures, TransitionMatrix, GCN_FEATURES};

/// Random traffic features on a ring of `n` segments.
pub fn features(n: usize, rng: &mut Rng) -> TrafficFeatures {
    let segs: Vec<Segment> = (0..n)
        .map(|i| Segment {
            external_id: i.to_string(),
            length_m: 100.0,
            speed_kmh: 30.0,
            class: 0,
            geometry: vec![(0.0, 0.0), (0.001, 0.0)],
        })
        .collect();
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let net = RoadNetwork::new(segs, &edges).unwrap();
    let tm = TransitionMatrix::build(&[], &net).unwrap();
    let x: Vec<f64> = (0..n * 24 * GCN_FEATURES).map(|_| rng.normal()).collect();
    TrafficFeatures::from_features(&tm, &net, &x, GCN_FEATURES)
}
