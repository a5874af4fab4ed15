use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{RoadNetwork, RoadTrajectory};
use crate::error::{Result, TigrError};

/// Smoothed segment-to-segment transition probabilities.
///
/// `p[i][j] = (transitions(i→j) + 1) / (visits(i) + |N(i)|)` for successors
/// `j` of `i` and exactly zero elsewhere. `p_norm = D⁻¹(P + I)` with `D` the
/// row sums of `P + I`. Both are stored dense, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub n: usize,
    pub p: Vec<f64>,
    pub p_norm: Vec<f64>,
}

impl TransitionMatrix {
    pub fn build(trajs: &[RoadTrajectory], net: &RoadNetwork) -> Result<Self> {
        let n = net.len();
        let mut visits = vec![0u64; n];
        let mut counts = vec![0u64; n * n];
        for t in trajs {
            for tok in &t.tokens {
                if tok.segment >= n {
                    return Err(TigrError::Index {
                        what: "segment",
                        index: tok.segment,
                        size: n,
                    });
                }
                visits[tok.segment] += 1;
            }
            for w in t.tokens.windows(2) {
                let (a, b) = (w[0].segment, w[1].segment);
                if !net.is_adjacent(a, b) {
                    return Err(TigrError::Data(format!(
                        "trajectory {}: transition {a}->{b} is not an edge",
                        t.id
                    )));
                }
                counts[a * n + b] += 1;
            }
        }
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let nb = net.neighbors(i);
            let denom = (visits[i] + nb.len() as u64) as f64;
            for &j in nb {
                p[i * n + j] = (counts[i * n + j] + 1) as f64 / denom;
            }
        }
        Ok(Self::from_p(n, p))
    }

    fn from_p(n: usize, p: Vec<f64>) -> Self {
        let mut p_norm = p.clone();
        for i in 0..n {
            let row = &mut p_norm[i * n..(i + 1) * n];
            row[i] += 1.0;
            let d: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= d);
        }
        TransitionMatrix { n, p, p_norm }
    }

    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn p_norm(&self, i: usize, j: usize) -> f64 {
        self.p_norm[i * self.n + j]
    }

    /// Writes the non-zero entries of `P` as `i,j,p`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TigrError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = String::from("i,j,p\n");
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.p(i, j);
                if v != 0.0 {
                    body.push_str(&format!("{i},{j},{v:e}\n"));
                }
            }
        }
        w.write_all(body.as_bytes()).map_err(|e| TigrError::io(path, e))?;
        w.flush().map_err(|e| TigrError::io(path, e))
    }

    pub fn load_csv(path: &Path, n: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| TigrError::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut p = vec![0.0; n * n];
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: String| TigrError::Parse {
                path: path.display().to_string(),
                line,
                reason,
            };
            let field = |k: usize| rec.get(k).ok_or_else(|| bad(format!("missing column {k}")));
            let i: usize = field(0)?.parse().map_err(|_| bad("bad i".into()))?;
            let j: usize = field(1)?.parse().map_err(|_| bad("bad j".into()))?;
            let v: f64 = field(2)?.parse().map_err(|_| bad("bad p".into()))?;
            if i >= n || j >= n || !(v > 0.0 && v <= 1.0) {
                return Err(bad(format!("entry ({i},{j},{v}) out of range")));
            }
            p[i * n + j] = v;
        }
        Ok(Self::from_p(n, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RoadToken, Segment};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn net(n: usize, edges: &[(usize, usize)]) -> RoadNetwork {
        let segs = (0..n)
            .map(|i| Segment {
                external_id: i.to_string(),
                length_m: 100.0,
                speed_kmh: 50.0,
                class: 2,
                geometry: vec![(0.0, 0.0), (1.0, 0.0)],
            })
            .collect();
        RoadNetwork::new(segs, edges).unwrap()
    }

    fn traj(segs: &[usize]) -> RoadTrajectory {
        RoadTrajectory {
            id: "t".into(),
            tokens: segs.iter().enumerate().map(|(i, &s)| RoadToken { segment: s, t: i as i64 }).collect(),
        }
    }

    #[test]
    fn count_oracle() {
        // a=0 → {b=1, c=2}; a→b twice, a→c once, three visits of a.
        let g = net(3, &[(0, 1), (0, 2), (1, 0), (2, 0)]);
        let trajs = [traj(&[0, 1]), traj(&[0, 1]), traj(&[0, 2])];
        let tm = TransitionMatrix::build(&trajs, &g).unwrap();
        assert!((tm.p(0, 1) - 0.6).abs() < 1e-12);
        assert!((tm.p(0, 2) - 0.4).abs() < 1e-12);
        assert_eq!(tm.p(0, 0), 0.0);
        // P' row 0: (1, 0.6, 0.4) / 2
        assert!((tm.p_norm(0, 0) - 0.5).abs() < 1e-12);
        assert!((tm.p_norm(0, 1) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn laplace_without_data() {
        let g = net(4, &[(0, 1), (0, 2), (0, 3), (1, 2)]);
        let tm = TransitionMatrix::build(&[], &g).unwrap();
        for j in 1..4 {
            assert!((tm.p(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(tm.p(1, 2), 1.0);
        // isolated row becomes the identity row
        assert_eq!(tm.p_norm(3, 3), 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let g = net(3, &[(0, 1), (0, 2), (1, 2)]);
        let tm = TransitionMatrix::build(&[traj(&[0, 1, 2])], &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tm.csv");
        tm.save_csv(&p).unwrap();
        assert_eq!(TransitionMatrix::load_csv(&p, 3).unwrap(), tm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn rows_sum_to_one_and_support_is_exact(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = Rng::new(seed);
            let mut edges = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    if rng.bernoulli(0.3) {
                        edges.push((a, b));
                    }
                }
            }
            let g = net(n, &edges);
            let mut trajs = Vec::new();
            for _ in 0..5 {
                let mut cur = rng.below(n);
                let mut path = vec![cur];
                while !g.neighbors(cur).is_empty() && path.len() < 8 {
                    let nb = g.neighbors(cur);
                    cur = nb[rng.below(nb.len())];
                    path.push(cur);
                }
                trajs.push(traj(&path));
            }
            let tm = TransitionMatrix::build(&trajs, &g).unwrap();
            for i in 0..n {
                let s: f64 = (0..n).map(|j| tm.p_norm(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for j in 0..n {
                    let v = tm.p(i, j);
                    if g.is_adjacent(i, j) {
                        prop_assert!(v > 0.0 && v <= 1.0);
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}
