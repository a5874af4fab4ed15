use std::f64::consts::PI;

use super::{hour_of_day, week_days, TrafficMatrix, TransitionMatrix, HOURS};
use crate::data::{RoadNetwork, Timestamp, ROAD_CLASSES};
use crate::error::{Result, TigrError};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

/// Traffic feature width: standardised hourly speed, standardised length,
/// standardised speed limit and the one-hot road class.
pub const GCN_FEATURES: usize = 3 + ROAD_CLASSES.len();

/// Per `(segment, hour)` inputs of the graph convolution with the
/// transition weights already applied: `P'[v,v]·x_v` and
/// `Σ_{j∈N(v)} P'[v,j]·x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficFeatures {
    pub n: usize,
    pub dim: usize,
    self_in: Vec<f64>,
    nbr_in: Vec<f64>,
}

fn standardise(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    move |v| (v - mean) / std
}

impl TrafficFeatures {
    pub fn new(tm: &TransitionMatrix, traffic: &TrafficMatrix, net: &RoadNetwork) -> Result<Self> {
        let n = net.len();
        if tm.n != n || traffic.n != n {
            return Err(TigrError::Dimension {
                op: "traffic features",
                lhs: vec![tm.n, traffic.n],
                rhs: vec![n],
            });
        }
        let speed = standardise(traffic.speed.iter().copied());
        let length = standardise(net.segments.iter().map(|s| s.length_m));
        let limit = standardise(net.segments.iter().map(|s| s.speed_kmh));
        let mut x = vec![0.0; n * HOURS * GCN_FEATURES];
        for v in 0..n {
            let seg = &net.segments[v];
            for h in 0..HOURS {
                let row = &mut x[(v * HOURS + h) * GCN_FEATURES..][..GCN_FEATURES];
                row[0] = speed(traffic.speed(v, h));
                row[1] = length(seg.length_m);
                row[2] = limit(seg.speed_kmh);
                row[3 + seg.class] = 1.0;
            }
        }
        Ok(Self::from_features(tm, net, &x, GCN_FEATURES))
    }

    /// Builds the weighted inputs from raw features `x` laid out as
    /// `n × 24 × dim`.
    pub fn from_features(tm: &TransitionMatrix, net: &RoadNetwork, x: &[f64], dim: usize) -> Self {
        let n = net.len();
        let mut self_in = vec![0.0; n * HOURS * dim];
        let mut nbr_in = vec![0.0; n * HOURS * dim];
        for v in 0..n {
            for h in 0..HOURS {
                let k = (v * HOURS + h) * dim;
                let pv = tm.p_norm(v, v);
                for c in 0..dim {
                    self_in[k + c] = pv * x[k + c];
                }
                for &j in net.neighbors(v) {
                    let pj = tm.p_norm(v, j);
                    let kj = (j * HOURS + h) * dim;
                    for c in 0..dim {
                        nbr_in[k + c] += pj * x[kj + c];
                    }
                }
            }
        }
        TrafficFeatures {
            n,
            dim,
            self_in,
            nbr_in,
        }
    }

    /// Self and neighbour input rows for each token.
    pub fn inputs<T: Real>(&self, segments: &[usize], times: &[Timestamp]) -> Result<(Tensor<T>, Tensor<T>)> {
        if segments.len() != times.len() {
            return Err(TigrError::Dimension {
                op: "traffic inputs",
                lhs: vec![segments.len()],
                rhs: vec![times.len()],
            });
        }
        let d = self.dim;
        let mut a = Vec::with_capacity(segments.len() * d);
        let mut b = Vec::with_capacity(segments.len() * d);
        for (&v, &t) in segments.iter().zip(times) {
            if v >= self.n {
                return Err(TigrError::Index {
                    what: "segment",
                    index: v,
                    size: self.n,
                });
            }
            let k = (v * HOURS + hour_of_day(t)) * d;
            a.extend(self.self_in[k..k + d].iter().map(|&x| T::from_f64(x)));
            b.extend(self.nbr_in[k..k + d].iter().map(|&x| T::from_f64(x)));
        }
        let shape = vec![segments.len(), d];
        Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGcnParams {
    pub w_self: ParamId,
    pub w_nbr: ParamId,
}

impl TrafficGcnParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(TrafficGcnParams {
            w_self: store.add_xavier(format!("{prefix}.w_self"), d_in, d_out, rng)?,
            w_nbr: store.add_xavier(format!("{prefix}.w_nbr"), d_in, d_out, rng)?,
        })
    }
}

/// `h_i = P'[i,i]·x_i·W_self + Σ_j P'[i,j]·x_j·W_nbr` for each token.
pub fn traffic_gcn<T: Real>(
    g: &mut Graph<T>,
    p: &TrafficGcnParams,
    feats: &TrafficFeatures,
    segments: &[usize],
    times: &[Timestamp],
) -> Result<Var> {
    let (a, b) = feats.inputs::<T>(segments, times)?;
    let a = g.constant(a);
    let b = g.constant(b);
    let hs = g.linear(a, p.w_self, None)?;
    let hn = g.linear(b, p.w_nbr, None)?;
    g.add(hs, hn)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbeddingParams {
    /// `1 × q` frequencies.
    pub w: ParamId,
    /// `q` phases.
    pub phi: ParamId,
}

impl TimeEmbeddingParams {
    /// Slot 0 is a linear ramp over the week scaled to `[−0.5, 0.5)`. The
    /// cosine slots start at daily then weekly harmonics in cosine/sine
    /// pairs; any remaining slots get random frequencies and phases.
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, q: usize, rng: &mut Rng) -> Result<Self> {
        if q < 2 {
            return Err(TigrError::config("model.time_dim", format!("need at least 2, got {q}")));
        }
        let mut w = vec![1.0 / 7.0];
        let mut phi = vec![-0.5];
        let periods = (1..=8).map(|m| 1.0 / m as f64).chain((1..=6).map(|m| 7.0 / m as f64));
        for period in periods {
            for phase in [0.0, -PI / 2.0] {
                w.push(2.0 * PI / period);
                phi.push(phase);
            }
        }
        w.truncate(q);
        phi.truncate(q);
        while w.len() < q {
            w.push(rng.range(0.0, 2.0 * PI / 0.25));
            phi.push(rng.range(0.0, 2.0 * PI));
        }
        Ok(TimeEmbeddingParams {
            w: store.add(format!("{prefix}.w"), Tensor::from_f64(&[1, q], &w)?)?,
            phi: store.add(format!("{prefix}.phi"), Tensor::from_f64(&[q], &phi)?)?,
        })
    }
}

/// Row `i` is `[w₀τᵢ + φ₀, cos(w₁τᵢ + φ₁), …]` with `τᵢ` the days since the
/// start of the week.
pub fn time_embed<T: Real>(g: &mut Graph<T>, p: &TimeEmbeddingParams, times: &[Timestamp]) -> Result<Var> {
    let tau: Vec<f64> = times.iter().map(|&t| week_days(t)).collect();
    let tau = g.constant(Tensor::from_f64(&[times.len(), 1], &tau)?);
    let lin = g.linear(tau, p.w, Some(p.phi))?;
    Ok(g.cos_tail(lin))
}

/// Per-head `d × d` query/key/value maps and the shared output map.
#[derive(Clone, Debug, PartialEq)]
pub struct LmaParams {
    pub d: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl LmaParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 {
            return Err(TigrError::config("model.lma_heads", "must be at least 1"));
        }
        let mut mk = |name: &str| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.add_xavier(format!("{prefix}.{name}{h}"), d, d, rng))
                .collect()
        };
        let wq = mk("wq")?;
        let wk = mk("wk")?;
        let wv = mk("wv")?;
        let wo = store.add_xavier(format!("{prefix}.wo"), d, d, rng)?;
        Ok(LmaParams { d, wq, wk, wv, wo })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

/// Row ranges attended by head `h`: for each sequence, the `h`-th of `H`
/// contiguous chunks of length `ceil(L/H)`. This is the chunking of the
/// sequence zero-padded to a multiple of `H`: padded keys are never
/// attended and padded queries are dropped. With `local == false` every
/// head attends the whole sequence.
fn head_blocks(lengths: &[usize], heads: usize, h: usize, local: bool) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut off = 0;
    for &len in lengths {
        if !local {
            blocks.push((off, off + len));
        } else {
            let chunk = len.div_ceil(heads);
            let s = h * chunk;
            if s < len {
                blocks.push((off + s, off + (s + chunk).min(len)));
            }
        }
        off += len;
    }
    blocks
}

/// Local multi-head attention over a batch of sequences stacked row-wise.
///
/// Head `h` projects the queries, keys and values of chunk `h` with its
/// own maps and attends only inside that chunk, scaled by `1/√d`. The
/// head outputs occupy disjoint rows, so their concatenation along the
/// sequence is their sum; it is then mapped by `W^O`.
pub fn local_multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &LmaParams,
    tq: Var,
    tk: Var,
    tv: Var,
    lengths: &[usize],
    local: bool,
) -> Result<Var> {
    let total: usize = lengths.iter().sum();
    for v in [tq, tk, tv] {
        let s = g.value(v).shape();
        if s.len() != 2 || s[0] != total || s[1] != p.d {
            return Err(TigrError::Dimension {
                op: "local attention input",
                lhs: s.to_vec(),
                rhs: vec![total, p.d],
            });
        }
    }
    let scale = 1.0 / (p.d as f64).sqrt();
    let mut acc: Option<Var> = None;
    for h in 0..p.heads() {
        let blocks = head_blocks(lengths, p.heads(), h, local);
        if blocks.is_empty() {
            continue;
        }
        let q = g.linear(tq, p.wq[h], None)?;
        let k = g.linear(tk, p.wk[h], None)?;
        let v = g.linear(tv, p.wv[h], None)?;
        let att = g.block_attention(q, k, v, &blocks, scale)?;
        acc = Some(match acc {
            Some(a) => g.add(a, att)?,
            None => att,
        });
    }
    let acc = acc.ok_or_else(|| TigrError::Contract("attention over empty batch".into()))?;
    g.linear(acc, p.wo, None)
}

/// `LMA(T^s, T^t, T^t) || LMA(T^t, T^s, T^s)` along the feature axis.
pub fn fuse_st<T: Real>(
    g: &mut Graph<T>,
    lma_s: &LmaParams,
    lma_t: &LmaParams,
    ts: Var,
    tt: Var,
    lengths: &[usize],
    local: bool,
) -> Result<Var> {
    if g.value(ts).shape() != g.value(tt).shape() {
        return Err(TigrError::Dimension {
            op: "fuse_st",
            lhs: g.value(ts).shape().to_vec(),
            rhs: g.value(tt).shape().to_vec(),
        });
    }
    let a = local_multi_head_attention(g, lma_s, ts, tt, tt, lengths, local)?;
    let b = local_multi_head_attention(g, lma_t, tt, ts, ts, lengths, local)?;
    g.concat_cols(&[a, b])
}

/// All parameters of the spatio-temporal branch. Output width is
/// `2 · half`, with the GCN emitting `half` columns and the time embedding
/// projected from `q` to `half` before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct StParams {
    pub half: usize,
    pub gcn: TrafficGcnParams,
    pub time: TimeEmbeddingParams,
    pub time_proj: ParamId,
    pub lma_s: LmaParams,
    pub lma_t: LmaParams,
}

impl StParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_st: usize,
        q: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_st < 2 || d_st % 2 != 0 {
            return Err(TigrError::config("model.d_st", format!("must be even and ≥ 2, got {d_st}")));
        }
        let half = d_st / 2;
        Ok(StParams {
            half,
            gcn: TrafficGcnParams::new(store, &format!("{prefix}.gcn"), GCN_FEATURES, half, rng)?,
            time: TimeEmbeddingParams::new(store, &format!("{prefix}.time"), q, rng)?,
            time_proj: store.add_xavier(format!("{prefix}.time_proj"), q, half, rng)?,
            lma_s: LmaParams::new(store, &format!("{prefix}.lma_s"), half, heads, rng)?,
            lma_t: LmaParams::new(store, &format!("{prefix}.lma_t"), half, heads, rng)?,
        })
    }

    /// Token embeddings `T^st` for a batch of sequences stacked row-wise.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        feats: &TrafficFeatures,
        segments: &[usize],
        times: &[Timestamp],
        lengths: &[usize],
        local: bool,
    ) -> Result<Var> {
        let ts = traffic_gcn(g, &self.gcn, feats, segments, times)?;
        let tt = time_embed(g, &self.time, times)?;
        let tt = g.linear(tt, self.time_proj, None)?;
        fuse_st(g, &self.lma_s, &self.lma_t, ts, tt, lengths, local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Segment;
    use crate::numerics::gradient_check;

    const MONDAY: Timestamp = 1_704_067_200;

    fn mat(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn eye(d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.row_mut(i)[i] = 1.0;
        }
        t
    }

    /// Dense single-sequence attention oracle: `softmax(q kᵀ/√d) v` per chunk.
    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, rows: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        let d = q.cols() as f64;
        rows.clone()
            .map(|i| {
                let s: Vec<f64> = rows
                    .clone()
                    .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                (0..v.cols())
                    .map(|c| rows.clone().zip(&s).map(|(j, x)| (x - m).exp() / z * v.row(j)[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn identity_lma(store: &mut ParamStore<f64>, d: usize, heads: usize) -> LmaParams {
        let mut ids = |n: &str| (0..heads).map(|h| store.add(format!("{n}{h}"), eye(d)).unwrap()).collect();
        let wq = ids("q");
        let wk = ids("k");
        let wv = ids("v");
        let wo = store.add("o", eye(d)).unwrap();
        LmaParams { d, wq, wk, wv, wo }
    }

    #[test]
    fn single_head_is_full_attention() {
        let mut rng = Rng::new(11);
        for case in 0..100 {
            let d = 2 + case % 5;
            let len = 1 + case % 9;
            let mut store = ParamStore::<f64>::new();
            let p = LmaParams::new(&mut store, "lma", d, 1, &mut rng).unwrap();
            let x = mat(&mut rng, len, d);
            let y = mat(&mut rng, len, d);
            let mut g = Graph::new(&store);
            let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
            let out = local_multi_head_attention(&mut g, &p, xv, yv, yv, &[len], true).unwrap();
            let proj = |t: &Tensor<f64>, id| t.matmul(&store.get(id).value).unwrap();
            let (q, k, v) = (proj(&x, p.wq[0]), proj(&y, p.wk[0]), proj(&y, p.wv[0]));
            let att = Tensor::from_rows(&attention_oracle(&q, &k, &v, 0..len)).unwrap();
            let want = att.matmul(&store.get(p.wo).value).unwrap();
            assert!(g.value(out).max_abs_diff(&want) < 1e-5);
        }
    }

    #[test]
    fn two_chunk_hand_oracle() {
        let mut store = ParamStore::<f64>::new();
        let p = identity_lma(&mut store, 2, 2);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let out = local_multi_head_attention(&mut g, &p, xv, xv, xv, &[4], true).unwrap();
        // chunk 1 rows (1,0),(0,1): scores [1,0]/√2 and [0,1]/√2
        let a = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
        // chunk 2 rows (1,1),(0,0): scores [2,0]/√2 and [0,0]
        let b = 1.0 / (1.0 + (-2.0 / 2f64.sqrt()).exp());
        let want = Tensor::from_rows(&[vec![a, 1.0 - a], vec![1.0 - a, a], vec![b, b], vec![0.5, 0.5]]).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-5, "{:?}", g.value(out));
    }

    #[test]
    fn equal_keys_give_value_mean() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::<f64>::new();
        let p = identity_lma(&mut store, 3, 2);
        let k = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5]; 6]).unwrap();
        let q = mat(&mut rng, 6, 3);
        let v = mat(&mut rng, 6, 3);
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v.clone()));
        let out = local_multi_head_attention(&mut g, &p, qv, kv, vv, &[6], true).unwrap();
        for (rows, chunk) in [(0..3, 0..3), (3..6, 3..6)] {
            for i in rows {
                for c in 0..3 {
                    let mean = chunk.clone().map(|j| v.row(j)[c]).sum::<f64>() / 3.0;
                    assert!((g.value(out).row(i)[c] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chunk_locality_with_padding() {
        // L = 7, H = 3: chunks [0,3), [3,6), [6,7)
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f64>::new();
        let p = LmaParams::new(&mut store, "lma", 4, 3, &mut rng).unwrap();
        let x = mat(&mut rng, 7, 4);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = local_multi_head_attention(&mut g, &p, xv, xv, xv, &[7], true).unwrap();
            g.value(out).clone()
        };
        let base = run(&x);
        for (tok, chunk) in [(1, 0..3), (4, 3..6), (6, 6..7)] {
            let mut y = x.clone();
            y.row_mut(tok)[0] += 1.0;
            let out = run(&y);
            for r in 0..7 {
                let changed = out.row(r).iter().zip(base.row(r)).any(|(a, b)| (a - b).abs() > 1e-12);
                assert_eq!(changed, chunk.contains(&r), "token {tok}, row {r}");
            }
        }
    }

    #[test]
    fn batching_matches_separate_sequences() {
        let mut rng = Rng::new(8);
        let mut store = ParamStore::<f64>::new();
        let p = LmaParams::new(&mut store, "lma", 4, 2, &mut rng).unwrap();
        let (a, b) = (mat(&mut rng, 5, 4), mat(&mut rng, 3, 4));
        let run = |rows: Vec<Vec<f64>>, lengths: &[usize]| {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::from_rows(&rows).unwrap());
            let out = local_multi_head_attention(&mut g, &p, x, x, x, lengths, true).unwrap();
            g.value(out).clone()
        };
        let rows = |t: &Tensor<f64>| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let both = run([rows(&a), rows(&b)].concat(), &[5, 3]);
        let sa = run(rows(&a), &[5]);
        let sb = run(rows(&b), &[3]);
        for r in 0..5 {
            assert_eq!(both.row(r), sa.row(r));
        }
        for r in 0..3 {
            assert_eq!(both.row(5 + r), sb.row(r));
        }
    }

    #[test]
    fn global_mode_attends_whole_sequence() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::<f64>::new();
        let p = LmaParams::new(&mut store, "lma", 4, 2, &mut rng).unwrap();
        let x = mat(&mut rng, 6, 4);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = local_multi_head_attention(&mut g, &p, xv, xv, xv, &[6], false).unwrap();
            g.value(out).clone()
        };
        let base = run(&x);
        let mut y = x.clone();
        y.row_mut(5)[0] += 1.0;
        let out = run(&y);
        assert!(out.row(0).iter().zip(base.row(0)).any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn time_embedding_examples() {
        let mut store = ParamStore::<f64>::new();
        let p = TimeEmbeddingParams::new(&mut store, "time", 8, &mut Rng::new(1)).unwrap();
        store.get_mut(p.phi).value = Tensor::zeros(&[8]);
        let mut g = Graph::new(&store);
        let e = time_embed(&mut g, &p, &[MONDAY]).unwrap();
        assert_eq!(g.value(e).row(0)[0], 0.0);
        assert!(g.value(e).row(0)[1..].iter().all(|&v| v == 1.0));

        let mut rng = Rng::new(2);
        let times: Vec<Timestamp> = (0..200).map(|_| MONDAY + (rng.uniform() * 3e6) as i64).collect();
        store.get_mut(p.phi).value = mat(&mut rng, 1, 8).reshape(vec![8]).unwrap();
        let mut g = Graph::new(&store);
        let e = time_embed(&mut g, &p, &times).unwrap();
        let v = g.value(e);
        assert!((0..v.rows()).all(|r| v.row(r)[1..].iter().all(|x| (-1.0..=1.0).contains(x))));
    }

    #[test]
    fn daily_and_weekly_periodicity() {
        let mut store = ParamStore::<f64>::new();
        let p = TimeEmbeddingParams::new(&mut store, "time", 6, &mut Rng::new(1)).unwrap();
        let day = 2.0 * PI;
        store.get_mut(p.w).value = Tensor::from_f64(&[1, 6], &[0.01, day, 2.0 * day, day, 3.0 * day, day]).unwrap();
        store.get_mut(p.phi).value = Tensor::from_f64(&[6], &[0.0, 0.3, -1.0, 2.0, 0.1, 0.7]).unwrap();
        let t = MONDAY + 37 * 3600 + 123;
        let mut g = Graph::new(&store);
        let e = time_embed(&mut g, &p, &[t, t + 86_400]).unwrap();
        let v = g.value(e);
        for k in 1..6 {
            assert!((v.row(0)[k] - v.row(1)[k]).abs() < 1e-5);
        }

        let week = 2.0 * PI / 7.0;
        let w: Vec<f64> = (0..6).map(|m| m as f64 * week * 3.0).collect();
        store.get_mut(p.w).value = Tensor::from_f64(&[1, 6], &w).unwrap();
        let mut g = Graph::new(&store);
        let e = time_embed(&mut g, &p, &[t, t + 7 * 86_400, t - 21 * 86_400]).unwrap();
        let v = g.value(e);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(0), v.row(2));
    }

    fn chain_net(n: usize, edges: &[(usize, usize)]) -> RoadNetwork {
        let segs = (0..n)
            .map(|i| Segment {
                external_id: i.to_string(),
                length_m: 100.0 + 10.0 * i as f64,
                speed_kmh: 30.0 + 10.0 * (i % 3) as f64,
                class: i % 7,
                geometry: vec![(0.0, 0.0), (1.0, 0.0)],
            })
            .collect();
        RoadNetwork::new(segs, edges).unwrap()
    }

    #[test]
    fn gcn_isolated_and_uniform() {
        let net = chain_net(3, &[(0, 1), (0, 2), (1, 2)]);
        let tm = TransitionMatrix::build(&[], &net).unwrap();
        let dim = 3;
        let x = vec![0.7; 3 * HOURS * dim];
        let feats = TrafficFeatures::from_features(&tm, &net, &x, dim);
        let mut store = ParamStore::<f64>::new();
        let p = TrafficGcnParams {
            w_self: store.add("ws", eye(dim)).unwrap(),
            w_nbr: store.add("wn", eye(dim)).unwrap(),
        };
        let mut g = Graph::new(&store);
        let h = traffic_gcn(&mut g, &p, &feats, &[0, 1, 2], &[MONDAY; 3]).unwrap();
        // rows of P' sum to one, so uniform features pass through unchanged
        for r in 0..3 {
            for &v in g.value(h).row(r) {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }

        // segment 2 has no successors: only the self term with P'[2,2] = 1
        let mut x = vec![0.0; 3 * HOURS * dim];
        for (k, v) in x.iter_mut().enumerate() {
            *v = k as f64;
        }
        let feats = TrafficFeatures::from_features(&tm, &net, &x, dim);
        let hour = 5;
        let mut g = Graph::new(&store);
        let h = traffic_gcn(&mut g, &p, &feats, &[2], &[MONDAY + hour * 3600]).unwrap();
        let k = (2 * HOURS + hour as usize) * dim;
        assert_eq!(g.value(h).row(0), &x[k..k + dim]);
    }

    #[test]
    fn fuse_shapes_zero_values_and_symmetry() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::<f64>::new();
        let a = LmaParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let b = LmaParams::new(&mut store, "b", 4, 2, &mut rng).unwrap();
        let ts = mat(&mut rng, 5, 4);
        let tt = mat(&mut rng, 5, 4);
        let mut g = Graph::new(&store);
        let (s, t) = (g.input(ts.clone()), g.input(tt));
        let out = fuse_st(&mut g, &a, &b, s, t, &[5], true).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 8]);
        let swapped = fuse_st(&mut g, &b, &a, t, s, &[5], true).unwrap();
        let (o, w) = (g.value(out).clone(), g.value(swapped).clone());
        for r in 0..5 {
            assert_eq!(&o.row(r)[..4], &w.row(r)[4..]);
            assert_eq!(&o.row(r)[4..], &w.row(r)[..4]);
        }
        let z = g.input(Tensor::zeros(&[5, 4]));
        let out = fuse_st(&mut g, &a, &b, s, z, &[5], true).unwrap();
        assert!((0..5).all(|r| g.value(out).row(r)[..4].iter().all(|&v| v == 0.0)));
        let short = g.input(Tensor::zeros(&[4, 4]));
        assert!(fuse_st(&mut g, &a, &b, s, short, &[5], true).is_err());
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let net = chain_net(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)]);
        let tm = TransitionMatrix::build(&[], &net).unwrap();
        let traffic = TrafficMatrix::build(&[], &net).unwrap();
        let feats = TrafficFeatures::new(&tm, &traffic, &net).unwrap();
        let mut store = ParamStore::<f64>::new();
        let p = StParams::new(&mut store, "st", 6, 4, 2, &mut rng).unwrap();
        let segments = [0, 1, 3, 0, 1, 2, 3];
        let times: Vec<Timestamp> = (0..7).map(|i| MONDAY + i * 1700).collect();
        let lengths = [3, 4];
        let weights = mat(&mut rng, 7, 6);
        let loss = |s: &ParamStore<f64>, backward: bool| -> Result<(f64, Option<_>)> {
            let mut g = Graph::new(s);
            let out = p.forward(&mut g, &feats, &segments, &times, &lengths, true)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            let l = g.mean(prod);
            let grads = if backward { Some(g.backward(l)?.params) } else { None };
            Ok((g.value(l).item(), grads))
        };
        let (_, grads) = loss(&store, true).unwrap();
        store.accumulate(&grads.unwrap());
        let report = gradient_check(&mut store, None, 1e-4, &mut rng, |s| Ok(loss(s, false)?.0)).unwrap();
        assert_eq!(report.len(), store.len());
        for (name, err) in report {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
