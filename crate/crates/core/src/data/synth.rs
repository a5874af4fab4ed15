use serde::{Deserialize, Serialize};

use super::{class_index, GridSpec, RawPoint, RawTrajectory, RoadNetwork, RoadToken, RoadTrajectory, Segment, Timestamp};
use crate::error::{Result, TigrError};
use crate::numerics::Rng;

/// Generator parameters for the Manhattan-lattice dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Intersections per side.
    pub lattice: usize,
    pub block_m: f64,
    pub trajectories: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub sample_interval_s: f64,
    pub cell_size_m: f64,
    pub margin_m: f64,
    /// South-west corner of the bounding box.
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub start_epoch: Timestamp,
    pub days: u32,
    /// `(hour, factor)` speed multipliers; unlisted hours use 1.
    pub rush_hours: Vec<(u32, f64)>,
    /// Per-traversal speed multiplier drawn from `[1 − s, 1 + s]`.
    pub speed_noise: f64,
    pub gps_noise_m: f64,
    pub straight_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lattice: 5,
            block_m: 400.0,
            trajectories: 5000,
            min_segments: 12,
            max_segments: 24,
            sample_interval_s: 15.0,
            cell_size_m: 200.0,
            margin_m: 200.0,
            origin_lon: -8.65,
            origin_lat: 41.14,
            start_epoch: 1_704_067_200,
            days: 7,
            rush_hours: vec![(7, 0.75), (8, 0.5), (9, 0.75), (16, 0.75), (17, 0.5), (18, 0.75)],
            speed_noise: 0.1,
            gps_noise_m: 3.0,
            straight_weight: 3.0,
        }
    }
}

/// Speed multiplier for an hour of day under `profile`.
pub fn hour_factor(profile: &[(u32, f64)], hour: u32) -> f64 {
    profile
        .iter()
        .find(|(h, _)| *h == hour)
        .map_or(1.0, |&(_, f)| f)
}

fn hour_of_day(t: f64) -> u32 {
    ((t.floor() as i64).rem_euclid(86_400) / 3600) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub network: RoadNetwork,
    pub grid: GridSpec,
    pub road: Vec<RoadTrajectory>,
    pub raw: Vec<RawTrajectory>,
}

struct Lattice {
    network: RoadNetwork,
    grid: GridSpec,
    /// Intersection `(row, col)` at each segment's start and end.
    ends: Vec<((usize, usize), (usize, usize))>,
    /// Segment endpoints in meters from the grid's south-west corner.
    coords: Vec<((f64, f64), (f64, f64))>,
}

fn line_class(k: usize, g: usize) -> &'static str {
    if k == g / 2 {
        "primary"
    } else if k == 0 || k + 1 == g {
        "secondary"
    } else {
        "residential"
    }
}

fn class_speed(class: &str) -> f64 {
    match class {
        "primary" => 50.0,
        "secondary" => 40.0,
        _ => 30.0,
    }
}

fn build_lattice(cfg: &SynthConfig) -> Result<Lattice> {
    let g = cfg.lattice;
    let side = (g - 1) as f64 * cfg.block_m + 2.0 * cfg.margin_m;
    let grid = GridSpec::from_meters(cfg.origin_lon, cfg.origin_lat, side, side, cfg.cell_size_m)?;
    let pos = |(r, c): (usize, usize)| (cfg.margin_m + c as f64 * cfg.block_m, cfg.margin_m + r as f64 * cfg.block_m);

    let mut streets = Vec::new();
    for r in 0..g {
        for c in 0..g {
            if c + 1 < g {
                streets.push(((r, c), (r, c + 1), line_class(r, g)));
            }
            if r + 1 < g {
                streets.push(((r, c), (r + 1, c), line_class(c, g)));
            }
        }
    }
    let mut segments = Vec::new();
    let mut ends = Vec::new();
    let mut coords = Vec::new();
    for &(a, b, class) in &streets {
        for (u, v) in [(a, b), (b, a)] {
            let (pu, pv) = (pos(u), pos(v));
            segments.push(Segment {
                external_id: segments.len().to_string(),
                length_m: cfg.block_m,
                speed_kmh: class_speed(class),
                class: class_index(class).expect("known class"),
                geometry: vec![grid.from_meters_offset(pu.0, pu.1), grid.from_meters_offset(pv.0, pv.1)],
            });
            ends.push((u, v));
            coords.push((pu, pv));
        }
    }
    let mut edges = Vec::new();
    for (i, &(u, v)) in ends.iter().enumerate() {
        for (j, &(u2, v2)) in ends.iter().enumerate() {
            if u2 == v && v2 != u {
                edges.push((i, j));
            }
        }
    }
    Ok(Lattice {
        network: RoadNetwork::new(segments, &edges)?,
        grid,
        ends,
        coords,
    })
}

/// Entry time of every segment plus the arrival time at the end of the
/// route. `noise` gives per-traversal speed multipliers.
fn traverse(net: &RoadNetwork, profile: &[(u32, f64)], route: &[usize], depart: f64, noise: &[f64]) -> Vec<f64> {
    let mut times = Vec::with_capacity(route.len() + 1);
    let mut t = depart;
    for (k, &s) in route.iter().enumerate() {
        times.push(t);
        let seg = &net.segments[s];
        let speed = seg.speed_kmh / 3.6 * hour_factor(profile, hour_of_day(t)) * noise.get(k).copied().unwrap_or(1.0);
        t += seg.length_m / speed;
    }
    times.push(t);
    times
}

fn is_straight(lat: &Lattice, a: usize, b: usize) -> bool {
    let ((r0, c0), (r1, c1)) = lat.ends[a];
    let ((_, _), (r2, c2)) = lat.ends[b];
    let d1 = (r1 as i64 - r0 as i64, c1 as i64 - c0 as i64);
    let d2 = (r2 as i64 - r1 as i64, c2 as i64 - c1 as i64);
    d1 == d2
}

fn walk(lat: &Lattice, cfg: &SynthConfig, len: usize, rng: &mut Rng) -> Vec<usize> {
    let net = &lat.network;
    let mut route = vec![rng.below(net.len())];
    while route.len() < len {
        let cur = *route.last().unwrap();
        let succ = net.neighbors(cur);
        let weights: Vec<f64> = succ
            .iter()
            .map(|&s| if is_straight(lat, cur, s) { cfg.straight_weight } else { 1.0 })
            .collect();
        let mut pick = rng.uniform() * weights.iter().sum::<f64>();
        let mut next = succ[succ.len() - 1];
        for (&s, &w) in succ.iter().zip(&weights) {
            if pick < w {
                next = s;
                break;
            }
            pick -= w;
        }
        route.push(next);
    }
    route
}

/// Generates a lattice network, its bounding grid and turn-biased random
/// walks timed by the rush-hour speed profile. Raw GPS points are sampled
/// along the segment polylines every `sample_interval_s` seconds.
pub fn synth_generate(cfg: &SynthConfig, rng: &mut Rng) -> Result<SynthDataset> {
    if cfg.lattice < 2 {
        return Err(TigrError::config("synth.lattice", "need at least 2 intersections per side"));
    }
    if cfg.trajectories == 0 {
        return Err(TigrError::config("synth.trajectories", "must be positive"));
    }
    if cfg.min_segments < 1 || cfg.max_segments < cfg.min_segments {
        return Err(TigrError::config("synth.min_segments", "need 1 ≤ min_segments ≤ max_segments"));
    }
    if !(cfg.sample_interval_s > 0.0 && cfg.block_m > 0.0 && cfg.days > 0) {
        return Err(TigrError::config("synth", "sample interval, block length and days must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.speed_noise) || cfg.gps_noise_m < 0.0 || cfg.straight_weight <= 0.0 {
        return Err(TigrError::config("synth", "noise levels or straight weight out of range"));
    }
    let lat = build_lattice(cfg)?;
    let (w, h) = lat.grid.extent_m();
    let mut road = Vec::with_capacity(cfg.trajectories);
    let mut raw = Vec::with_capacity(cfg.trajectories);
    let span = cfg.days as f64 * 86_400.0;

    for i in 0..cfg.trajectories {
        let id = i.to_string();
        let len = cfg.min_segments + rng.below(cfg.max_segments - cfg.min_segments + 1);
        let route = walk(&lat, cfg, len, rng);
        let depart = (cfg.start_epoch as f64 + rng.uniform() * span).floor();
        let noise: Vec<f64> = (0..len)
            .map(|_| rng.range(1.0 - cfg.speed_noise, 1.0 + cfg.speed_noise))
            .collect();
        let times = traverse(&lat.network, &cfg.rush_hours, &route, depart, &noise);

        let tokens = route
            .iter()
            .zip(&times)
            .map(|(&segment, &t)| RoadToken { segment, t: t.floor() as Timestamp })
            .collect();
        road.push(RoadTrajectory { id: id.clone(), tokens });

        let end = times[len];
        let mut sample_times: Vec<f64> = Vec::new();
        let mut t = depart;
        while t < end {
            sample_times.push(t);
            t += cfg.sample_interval_s;
        }
        if end.floor() > sample_times.last().unwrap().floor() {
            sample_times.push(end.floor());
        }
        let mut k = 0;
        let mut points = Vec::with_capacity(sample_times.len());
        for &ts in &sample_times {
            while k + 1 < len && times[k + 1] <= ts {
                k += 1;
            }
            let frac = ((ts - times[k]) / (times[k + 1] - times[k])).clamp(0.0, 1.0);
            let ((x0, y0), (x1, y1)) = lat.coords[route[k]];
            let e = (x0 + frac * (x1 - x0) + cfg.gps_noise_m * rng.normal()).clamp(0.0, w);
            let n = (y0 + frac * (y1 - y0) + cfg.gps_noise_m * rng.normal()).clamp(0.0, h);
            let (x, y) = lat.grid.from_meters_offset(e, n);
            points.push(RawPoint { x, y, t: ts as Timestamp });
        }
        raw.push(RawTrajectory::new(id, points)?);
    }
    Ok(SynthDataset {
        network: lat.network,
        grid: lat.grid,
        road,
        raw,
    })
}
