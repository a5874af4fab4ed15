use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::hour_of_day;
use crate::data::{RoadNetwork, RoadTrajectory};
use crate::error::{Result, TigrError};

pub const HOURS: usize = 24;

/// Mean observed speed (km/h) per segment and hour of day.
///
/// Cells without observations are filled from the segment's all-hour mean,
/// then the hour's network mean, then the global mean, then the speed limit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficMatrix {
    pub n: usize,
    /// `n × 24`, row-major.
    pub speed: Vec<f64>,
    pub count: Vec<u64>,
    /// Consecutive token pairs skipped for a non-positive duration.
    pub skipped: usize,
}

impl TrafficMatrix {
    pub fn build(trajs: &[RoadTrajectory], net: &RoadNetwork) -> Result<Self> {
        let n = net.len();
        let mut sum = vec![0.0; n * HOURS];
        let mut count = vec![0u64; n * HOURS];
        let mut skipped = 0;
        for t in trajs {
            for w in t.tokens.windows(2) {
                let (v, dt) = (w[0].segment, w[1].t - w[0].t);
                if v >= n {
                    return Err(TigrError::Index {
                        what: "segment",
                        index: v,
                        size: n,
                    });
                }
                if dt <= 0 {
                    skipped += 1;
                    continue;
                }
                let kmh = net.segments[v].length_m / dt as f64 * 3.6;
                let cell = v * HOURS + hour_of_day(w[0].t);
                sum[cell] += kmh;
                count[cell] += 1;
            }
        }
        let limits: Vec<f64> = net.segments.iter().map(|s| s.speed_kmh).collect();
        Ok(Self::fill(n, &sum, count, skipped, &limits))
    }

    fn fill(n: usize, sum: &[f64], count: Vec<u64>, skipped: usize, limits: &[f64]) -> Self {
        let mean = |s: f64, c: u64| (c > 0).then(|| s / c as f64);
        let seg_mean: Vec<Option<f64>> = (0..n)
            .map(|v| {
                let r = v * HOURS..(v + 1) * HOURS;
                mean(sum[r.clone()].iter().sum(), count[r].iter().sum())
            })
            .collect();
        let hour_mean: Vec<Option<f64>> = (0..HOURS)
            .map(|h| {
                let s = (0..n).map(|v| sum[v * HOURS + h]).sum();
                let c = (0..n).map(|v| count[v * HOURS + h]).sum();
                mean(s, c)
            })
            .collect();
        let global = mean(sum.iter().sum(), count.iter().sum());
        let mut speed = vec![0.0; n * HOURS];
        for v in 0..n {
            for h in 0..HOURS {
                let k = v * HOURS + h;
                speed[k] = mean(sum[k], count[k])
                    .or(seg_mean[v])
                    .or(hour_mean[h])
                    .or(global)
                    .unwrap_or(limits[v]);
            }
        }
        TrafficMatrix {
            n,
            speed,
            count,
            skipped,
        }
    }

    pub fn speed(&self, v: usize, hour: usize) -> f64 {
        self.speed[v * HOURS + hour]
    }

    pub fn count(&self, v: usize, hour: usize) -> u64 {
        self.count[v * HOURS + hour]
    }

    /// Mean over segments of the speed at `hour`.
    pub fn hour_mean(&self, hour: usize) -> f64 {
        (0..self.n).map(|v| self.speed(v, hour)).sum::<f64>() / self.n as f64
    }

    /// Writes `segment,hour,speed,count` for every cell.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TigrError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = String::from("segment,hour,speed,count\n");
        for v in 0..self.n {
            for h in 0..HOURS {
                body.push_str(&format!("{v},{h},{:e},{}\n", self.speed(v, h), self.count(v, h)));
            }
        }
        w.write_all(body.as_bytes()).map_err(|e| TigrError::io(path, e))?;
        w.flush().map_err(|e| TigrError::io(path, e))
    }

    pub fn load_csv(path: &Path, n: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| TigrError::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut speed = vec![f64::NAN; n * HOURS];
        let mut count = vec![0u64; n * HOURS];
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: &str| TigrError::Parse {
                path: path.display().to_string(),
                line,
                reason: reason.to_string(),
            };
            let get = |k: usize| rec.get(k).ok_or_else(|| bad("missing column"));
            let v: usize = get(0)?.parse().map_err(|_| bad("bad segment"))?;
            let h: usize = get(1)?.parse().map_err(|_| bad("bad hour"))?;
            let s: f64 = get(2)?.parse().map_err(|_| bad("bad speed"))?;
            let c: u64 = get(3)?.parse().map_err(|_| bad("bad count"))?;
            if v >= n || h >= HOURS || !(s > 0.0 && s.is_finite()) {
                return Err(bad("entry out of range"));
            }
            speed[v * HOURS + h] = s;
            count[v * HOURS + h] = c;
        }
        if speed.iter().any(|s| s.is_nan()) {
            return Err(TigrError::Data(format!("{}: traffic matrix incomplete", path.display())));
        }
        Ok(TrafficMatrix {
            n,
            speed,
            count,
            skipped: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RoadToken, Segment};

    fn net(n: usize) -> RoadNetwork {
        let segs = (0..n)
            .map(|i| Segment {
                external_id: i.to_string(),
                length_m: 100.0,
                speed_kmh: 50.0,
                class: 2,
                geometry: vec![(0.0, 0.0), (1.0, 0.0)],
            })
            .collect();
        let edges: Vec<_> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        RoadNetwork::new(segs, &edges).unwrap()
    }

    fn traj(tokens: &[(usize, i64)]) -> RoadTrajectory {
        RoadTrajectory {
            id: "t".into(),
            tokens: tokens.iter().map(|&(segment, t)| RoadToken { segment, t }).collect(),
        }
    }

    const H8_30: i64 = 8 * 3600 + 1800;

    #[test]
    fn unit_arithmetic() {
        let tm = TrafficMatrix::build(&[traj(&[(0, H8_30), (1, H8_30 + 10)])], &net(2)).unwrap();
        assert!((tm.speed(0, 8) - 36.0).abs() < 1e-12);
        assert_eq!(tm.count(0, 8), 1);
        // same segment, other hours: its all-hour mean
        assert!((tm.speed(0, 3) - 36.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_chain() {
        let trajs = [
            traj(&[(0, H8_30), (1, H8_30 + 10)]),
            traj(&[(1, 3 * 3600), (0, 3 * 3600 + 20)]),
        ];
        let tm = TrafficMatrix::build(&trajs, &net(3)).unwrap();
        // segment 2 never traversed: hour-of-network mean
        assert!((tm.speed(2, 8) - 36.0).abs() < 1e-12);
        assert!((tm.speed(2, 3) - 18.0).abs() < 1e-12);
        // hour with no data anywhere: global mean
        assert!((tm.speed(2, 12) - 27.0).abs() < 1e-12);
        let empty = TrafficMatrix::build(&[], &net(2)).unwrap();
        assert_eq!(empty.speed(1, 5), 50.0);
    }

    #[test]
    fn zero_duration_skipped() {
        let tm = TrafficMatrix::build(&[traj(&[(0, 100), (1, 100), (0, 110)])], &net(2)).unwrap();
        assert_eq!(tm.skipped, 1);
        assert!((tm.speed(1, 0) - 36.0).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let tm = TrafficMatrix::build(&[traj(&[(0, H8_30), (1, H8_30 + 10)])], &net(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traffic.csv");
        tm.save_csv(&p).unwrap();
        let back = TrafficMatrix::load_csv(&p, 2).unwrap();
        assert_eq!(back.speed, tm.speed);
        assert_eq!(back.count, tm.count);
    }
}
