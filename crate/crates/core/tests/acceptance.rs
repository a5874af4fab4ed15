//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process exits nonzero
//! when a gated check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use tigr::config::RunConfig;
use tigr::data::{
    GridToken, GridTrajectory, RawPoint, RawTrajectory, RoadNetwork, RoadToken, RoadTrajectory, Segment, TrajectoryRecord,
};
use tigr::downstream::{
    destination_prefix, encode_records, encode_trajectory, odd_even, prefix_len, split_halves, start_time_only, travel_time,
    ts_metrics, ts_ranks, tte_run, write_metrics, HeadConfig, MetricsReport, Metrics,
};
use tigr::encoder::{load_checkpoint, Ablation, Branch, BranchSet, ModelConfig, ModelSpec, TigrModel};
use tigr::masking::{random_mask, MaskingConfig};
use tigr::numerics::{gradient_check, Adam, Graph, GradBuffer, ParamId, ParamStore, Rng, ShadowStore, Tensor};
use tigr::pipeline::{ablation_run, ablation_variants, eval_ts, evaluate, run_pretrain, write_ablation_csv, Dataset, Task};
use tigr::spatiotemporal::{local_multi_head_attention, LmaParams, TrafficFeatures, TransitionMatrix, GCN_FEATURES};
use tigr::training::{
    info_nce, prepare_step, step_loss, target_projections, NegativeQueue, Queues, StepInputs, TrainConfig,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &res {
        Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}; {secs:.1} s)"),
        Err(detail) => println!("criterion {n:>2} {name}: FAIL ({detail}; {secs:.1} s)"),
    }
    res.is_ok()
}

// ---------------------------------------------------------------- fixtures

fn ring_network(n: usize, edges: &[(usize, usize)]) -> RoadNetwork {
    let segs = (0..n)
        .map(|i| Segment {
            external_id: i.to_string(),
            length_m: 100.0,
            speed_kmh: 30.0,
            class: 0,
            geometry: vec![(0.0, 0.0), (0.001, 0.0)],
        })
        .collect();
    RoadNetwork::new(segs, edges).unwrap()
}

fn ring_features(n: usize, rng: &mut Rng) -> TrafficFeatures {
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let net = ring_network(n, &edges);
    let tm = TransitionMatrix::build(&[], &net).unwrap();
    let x: Vec<f64> = (0..n * 24 * GCN_FEATURES).map(|_| rng.normal()).collect();
    TrafficFeatures::from_features(&tm, &net, &x, GCN_FEATURES)
}

fn record(id: usize, rng: &mut Rng, n_cells: usize, n_seg: usize, len: usize) -> TrajectoryRecord {
    let t0 = 1_704_067_200 + rng.below(7 * 86_400) as i64;
    let grid = GridTrajectory {
        id: id.to_string(),
        tokens: (0..len).map(|i| GridToken { cell: rng.below(n_cells), t: t0 + 30 * i as i64 }).collect(),
    };
    let road = RoadTrajectory {
        id: id.to_string(),
        tokens: (0..len).map(|i| RoadToken { segment: rng.below(n_seg), t: t0 + 40 * i as i64 }).collect(),
    };
    let raw = RawTrajectory {
        id: id.to_string(),
        points: (0..=len).map(|i| RawPoint { x: 0.0, y: 0.0, t: t0 + 40 * i as i64 }).collect(),
    };
    TrajectoryRecord { id: id.to_string(), raw, grid, road }
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn tiny_spec(mu: f64) -> ModelSpec {
    ModelSpec {
        config: ModelConfig {
            d_g: 16,
            d_r: 16,
            d_st: 16,
            proj_dim: 16,
            n_layers: 1,
            h_enc: 2,
            h_lma: 2,
            q: 4,
            dropout: 0.0,
            mu,
            ..Default::default()
        },
        ablation: Ablation::default(),
        n_cells: 12,
        n_segments: 9,
        seed: 3,
    }
}

struct Tiny {
    model: TigrModel<f64>,
    inputs: StepInputs,
    queues: Queues<f64>,
    cfg: TrainConfig,
    feats: TrafficFeatures,
}

impl Tiny {
    /// d = 16, L ≤ 8, B = 4, queue of 8, one encoder layer.
    fn new(lambda: f64) -> Self {
        let mut rng = Rng::new(10);
        let feats = ring_features(9, &mut rng);
        let model = TigrModel::<f64>::new(tiny_spec(0.999)).unwrap();
        let recs: Vec<TrajectoryRecord> = (0..4).map(|i| record(i, &mut rng, 12, 9, [4, 6, 8, 5][i])).collect();
        let refs: Vec<&TrajectoryRecord> = recs.iter().collect();
        let inputs = prepare_step(&model, &refs, &MaskingConfig::default(), &Rng::new(5));
        let mut queues = Queues::<f64>::new(Branch::ALL, 8, 16);
        for (_, q) in queues.queues.iter_mut() {
            q.enqueue(&Tensor::from_rows(&unit_rows(&mut rng, 8, 16)).unwrap()).unwrap();
        }
        let cfg = TrainConfig { batch: 4, queue: 8, lambda, tau: 0.5, ..Default::default() };
        Tiny { model, inputs, queues, cfg, feats }
    }

    fn targets(&self) -> Vec<(Branch, Tensor<f64>)> {
        target_projections(&self.model, &self.inputs, Some(&self.feats)).unwrap()
    }

    /// Loss values (total, intra, inter).
    fn losses(&self, targets: &[(Branch, Tensor<f64>)]) -> (f64, f64, f64) {
        let mut g = Graph::new(&self.model.store);
        let p = step_loss(&mut g, &self.model, &self.inputs, targets, &self.queues, &self.cfg, Some(&self.feats), None).unwrap();
        (g.value(p.total).item(), g.value(p.intra).item(), g.value(p.inter.unwrap()).item())
    }

    fn grads(&self, targets: &[(Branch, Tensor<f64>)], part: &str) -> GradBuffer<f64> {
        let mut g = Graph::new(&self.model.store);
        let p = step_loss(&mut g, &self.model, &self.inputs, targets, &self.queues, &self.cfg, Some(&self.feats), None).unwrap();
        let v = match part {
            "total" => p.total,
            "intra" => p.intra,
            _ => p.inter.unwrap(),
        };
        g.backward(v).unwrap().params
    }
}

fn grad_diff(a: &GradBuffer<f64>, b: &GradBuffer<f64>, n: usize) -> f64 {
    let max_abs = |t: &Tensor<f64>| t.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    (0..n)
        .map(ParamId)
        .map(|id| match (a.get(id), b.get(id)) {
            (Some(x), Some(y)) => x.max_abs_diff(y),
            (Some(x), None) | (None, Some(x)) => max_abs(x),
            (None, None) => 0.0,
        })
        .fold(0.0, f64::max)
}

fn bits<T: tigr::numerics::Real>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

fn mat(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

// --------------------------------------------------------------- criteria

fn gradient_fidelity() -> Check {
    let mut t = Tiny::new(0.5);
    // Embedding rows at unit scale; at the 0.02 init scale a 1e-3 step is
    // 5% of a row and central differences are dominated by truncation.
    let mut rng = Rng::new(77);
    for p in t.model.store.iter_mut().filter(|p| p.name.ends_with(".embed")) {
        let n = p.value.numel();
        p.value = Tensor::new(p.value.shape().to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap();
    }
    let targets = t.targets();
    let grads = t.grads(&targets, "total");
    t.model.store.accumulate(&grads);
    let frozen = t.model.clone();
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let p = step_loss(&mut g, &frozen, &t.inputs, &targets, &t.queues, &t.cfg, Some(&t.feats), None)?;
        Ok(g.value(p.total).item())
    };
    let start = Instant::now();
    let report = gradient_check(&mut t.model.store, None, 1e-3, &mut Rng::new(1), loss).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    for group in ["grid.embed", "road.embed", "st.gcn", "st.time", "st.lma", "encoder", "head"] {
        ensure!(report.keys().any(|k| k.contains(group)), "parameter group {group} not checked");
    }
    let (name, worst) = report.iter().fold(("", 0.0f64), |w, (k, &v)| if v > w.1 { (k.as_str(), v) } else { w });
    ensure!(worst < 1e-3, "max relative error {worst:.2e} at {name}");
    ensure!(secs < 60.0, "gradient check took {secs:.1} s");
    Ok(format!("{} tensors, max rel err {worst:.2e} at {name}", report.len()))
}

/// Dense attention oracle `softmax(q kᵀ/√d) v` over all rows.
fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let d = q.cols() as f64;
    let rows: Vec<Vec<f64>> = (0..q.rows())
        .map(|i| {
            let s: Vec<f64> = (0..k.rows())
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            (0..v.cols()).map(|c| s.iter().enumerate().map(|(j, x)| (x - m).exp() / z * v.row(j)[c]).sum()).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn lma_degeneracy() -> Check {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
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
        let att = attention(&proj(&x, p.wq[0]), &proj(&y, p.wk[0]), &proj(&y, p.wv[0]));
        let want = att.matmul(&store.get(p.wo).value).unwrap();
        worst = worst.max(g.value(out).max_abs_diff(&want));
    }
    ensure!(worst < 1e-5, "H=1 max abs diff {worst:.2e}");

    // L = 10: H = 2 gives chunks of 5, H = 4 chunks of 3 with a short tail.
    let len = 10usize;
    for heads in [2usize, 4] {
        let chunk = len.div_ceil(heads);
        let mut store = ParamStore::<f64>::new();
        let p = LmaParams::new(&mut store, "lma", 4, heads, &mut rng).unwrap();
        let x = mat(&mut rng, len, 4);
        let forward = |x: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = local_multi_head_attention(&mut g, &p, xv, xv, xv, &[len], true).unwrap();
            g.value(out).clone()
        };
        let base = forward(&x);
        for tok in 0..len {
            let mut y = x.clone();
            y.row_mut(tok)[0] += 1.0;
            let out = forward(&y);
            for r in 0..len {
                let changed = out.row(r).iter().zip(base.row(r)).any(|(a, b)| (a - b).abs() > 1e-12);
                ensure!(changed == (r / chunk == tok / chunk), "H={heads}: token {tok} vs row {r} locality broken");
            }
        }
    }
    Ok(format!("H=1 max abs diff {worst:.2e} over 100 cases; locality holds for H=2,4"))
}

fn road_traj(segs: &[usize]) -> RoadTrajectory {
    RoadTrajectory {
        id: "t".into(),
        tokens: segs.iter().enumerate().map(|(i, &s)| RoadToken { segment: s, t: i as i64 }).collect(),
    }
}

fn transition_matrix() -> Check {
    // a → b twice, a → c once: (2+1)/(3+2), (1+1)/(3+2)
    let g = ring_network(3, &[(0, 1), (0, 2), (1, 0), (2, 0)]);
    let tm = TransitionMatrix::build(&[road_traj(&[0, 1]), road_traj(&[0, 1]), road_traj(&[0, 2])], &g).unwrap();
    ensure!((tm.p(0, 1) - 0.6).abs() < 1e-12 && (tm.p(0, 2) - 0.4).abs() < 1e-12, "count oracle");
    ensure!(tm.p(0, 0) == 0.0, "non-adjacent entry");
    ensure!((tm.p_norm(0, 0) - 0.5).abs() < 1e-12 && (tm.p_norm(0, 1) - 0.3).abs() < 1e-12, "normalised row");

    let g = ring_network(4, &[(0, 1), (0, 2), (0, 3), (1, 2)]);
    let tm = TransitionMatrix::build(&[], &g).unwrap();
    ensure!((1..4).all(|j| (tm.p(0, j) - 1.0 / 3.0).abs() < 1e-12), "Laplace row without data");
    ensure!(tm.p(1, 2) == 1.0 && tm.p_norm(3, 3) == 1.0, "single successor / isolated row");

    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = Rng::new(seed);
        let n = 1 + (seed as usize % 11);
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).filter(|_| rng.bernoulli(0.3)).collect();
        let g = ring_network(n, &edges);
        let mut trajs = Vec::new();
        for _ in 0..5 {
            let mut cur = rng.below(n);
            let mut path = vec![cur];
            while !g.neighbors(cur).is_empty() && path.len() < 8 {
                let nb = g.neighbors(cur);
                cur = nb[rng.below(nb.len())];
                path.push(cur);
            }
            trajs.push(road_traj(&path));
        }
        let tm = TransitionMatrix::build(&trajs, &g).unwrap();
        for i in 0..n {
            worst = worst.max(((0..n).map(|j| tm.p_norm(i, j)).sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "row sum deviation {worst:.2e}");
    Ok(format!("oracles exact; max row-sum deviation {worst:.1e} on 50 graphs"))
}

fn nce(q: &[f64], p: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let qv = g.constant(Tensor::from_rows(&[q.to_vec()]).unwrap());
    let pv = g.constant(Tensor::from_rows(&[p.to_vec()]).unwrap());
    let mut queue = NegativeQueue::new(16, q.len());
    if !negs.is_empty() {
        queue.enqueue(&Tensor::from_rows(&negs.iter().map(|n| n.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap();
    }
    let l = info_nce(&mut g, qv, pv, &queue, tau).unwrap();
    g.value(l).item()
}

fn loss_algebra() -> Check {
    let t = Tiny::new(0.3);
    let targets = t.targets();
    let (total, intra, inter) = t.losses(&targets);
    let gap = (total - (0.3 * intra + 0.7 * inter)).abs();
    ensure!(gap < 1e-6, "identity off by {gap:.2e}");

    let n = t.model.store.len();
    let mut t1 = Tiny::new(1.0);
    let d1 = grad_diff(&t1.grads(&targets, "total"), &t1.grads(&targets, "intra"), n);
    t1.cfg.lambda = 0.0;
    let d0 = grad_diff(&t1.grads(&targets, "total"), &t1.grads(&targets, "inter"), n);
    ensure!(d1 < 1e-6 && d0 < 1e-6, "endpoint gradients differ: λ=1 {d1:.2e}, λ=0 {d0:.2e}");

    let sig6 = |got: f64, want: f64| ((got - want) / want).abs() < 5e-7;
    ensure!(nce(&[1.0, 0.0], &[1.0, 0.0], &[], 0.05) == 0.0, "empty queue");
    let want = (1.0 + (-20f64).exp()).ln();
    let got = nce(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 0.05);
    ensure!(sig6(got, want), "aligned pair: {got:e} vs {want:e}");
    let want = (1.0 + 1f64.exp()).ln();
    let got = nce(&[0.0, 1.0], &[1.0, 0.0], &[&[0.0, 1.0]], 1.0);
    ensure!(sig6(got, want), "orthogonal pair: {got} vs {want}");
    let want = (3.0f64).ln();
    let got = nce(&[0.6, 0.8], &[0.8, -0.6], &[&[-0.8, 0.6], &[0.0, 0.0]], 0.1);
    ensure!(sig6(got, want), "equal logits: {got} vs {want}");

    let mut m = t.model.clone();
    let shadow = m.shadow.clone();
    m.store.accumulate(&t.grads(&targets, "total"));
    let mut adam = Adam::new(&m.store, 1e-2);
    adam.step(&mut m.store, None).unwrap();
    let mut moved = 0;
    for id in shadow.ids() {
        ensure!(bits(shadow.get(id).unwrap()) == bits(m.shadow.get(id).unwrap()), "target tensor {} changed", m.store.get(id).name);
        moved += usize::from(m.store.get(id).value != *shadow.get(id).unwrap());
    }
    ensure!(moved > 0, "anchor did not move");
    Ok(format!("identity gap {gap:.1e}; endpoint grad diffs {d1:.1e}/{d0:.1e}; {moved} anchors moved, targets bit-identical"))
}

struct Desk {
    cfg: RunConfig,
    ds: Dataset,
    model: Option<TigrModel<f32>>,
    ratio: f64,
    hr1: f64,
    secs: f64,
}

fn desk_run() -> Result<Desk, String> {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let ds = Dataset::synthetic(&cfg).map_err(|e| e.to_string())?;
    let (model, out) = run_pretrain(&cfg, &ds, None).map_err(|e| e.to_string())?;
    let m = eval_ts(&cfg, &ds, &model, &[cfg.eval.k_neg]).map_err(|e| e.to_string())?[0].1;
    let means = &out.epoch_means;
    println!("    desk epoch mean losses: {}", means.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "));
    Ok(Desk {
        ratio: means[means.len() - 1] / means[0],
        hr1: m.hr1,
        secs: start.elapsed().as_secs_f64(),
        cfg,
        ds,
        model: Some(model),
    })
}

fn kneg_trend(desk: &Desk) -> Check {
    let model = desk.model.as_ref().ok_or("no trained checkpoint")?;
    let res = eval_ts(&desk.cfg, &desk.ds, model, &[100, 500, 1000, 2000]).map_err(|e| e.to_string())?;
    let hr: Vec<f64> = res.iter().map(|(_, m)| m.hr1).collect();
    for (w, k) in hr.windows(2).zip(&res[1..]) {
        ensure!(w[1] <= w[0] + 0.01, "HR@1 rises at k_neg {}: {hr:?}", k.0);
    }
    Ok(format!("HR@1 at 100/500/1000/2000 = {}", hr.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")))
}

/// Sets `structure_ok` once the table is complete and every variant has
/// trained and evaluated; the branch-combination trend is checked after.
fn ablation(structure_ok: &mut bool) -> Check {
    let mut cfg = RunConfig::desk();
    cfg.data.synth.trajectories = 1500;
    cfg.train.epochs = 2;
    cfg.eval.queries = 200;
    cfg.eval.k_neg = 200;
    let ds = Dataset::synthetic(&cfg).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for v in ablation_variants() {
        let row = ablation_run(&cfg, &ds, &v, 0, &[Task::Ts]).map_err(|e| format!("{}: {e}", v.label()))?;
        ensure!(row.ts_hr1.is_some_and(f64::is_finite), "{} has no HR@1", row.config);
        rows.push(row);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    write_ablation_csv(&path, &rows).map_err(|e| e.to_string())?;
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    ensure!(lines == 11, "ablation.csv has {lines} lines");

    let mut mean: BTreeMap<String, f64> = BTreeMap::new();
    for label in ["g", "r", "st", "g+r+st"] {
        let branches: BranchSet = label.parse().map_err(|e: tigr::TigrError| e.to_string())?;
        let mut sum = rows.iter().find(|r| r.config == label).and_then(|r| r.ts_hr1).unwrap();
        for seed in [1, 2] {
            let v = Ablation { branches: branches.clone(), ..Default::default() };
            sum += ablation_run(&cfg, &ds, &v, seed, &[Task::Ts]).map_err(|e| e.to_string())?.ts_hr1.unwrap();
        }
        mean.insert(label.to_string(), sum / 3.0);
    }
    *structure_ok = true;
    let single = ["g", "r", "st"].iter().map(|l| mean[*l]).fold(0.0, f64::max);
    let all = mean["g+r+st"];
    let table = mean.iter().map(|(k, v)| format!("{k} {v:.3}")).collect::<Vec<_>>().join(", ");
    ensure!(all >= single - 0.02, "3-branch {all:.3} < best single {single:.3} - 0.02 ({table})");
    Ok(format!("10 rows; mean HR@1 over 3 seeds: {table}"))
}

fn unit(i: usize, d: usize) -> Vec<f32> {
    (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

fn metric_oracles() -> Check {
    let q: Vec<Vec<f32>> = (0..4).map(|i| unit(i, 8)).collect();
    let db: Vec<Vec<f32>> = (0..8).map(|i| unit(i, 8)).collect();
    let m = ts_metrics(&q, &db, &[0, 1, 2, 3]);
    ensure!((m.mr, m.hr1, m.hr5) == (1.0, 1.0, 1.0), "identical pairs: {m:?}");

    let m = ts_metrics(&[unit(0, 4)], &[unit(1, 4), unit(0, 4)], &[0]);
    ensure!((m.mr, m.hr1, m.hr5) == (2.0, 0.0, 1.0), "closer distractor: {m:?}");

    let db = vec![unit(0, 2); 7];
    let ranks: Vec<usize> = (0..7).map(|t| ts_ranks(&[unit(0, 2)], &db, &[t])[0]).collect();
    ensure!(ranks == (1..=7).collect::<Vec<_>>(), "tie ranks {ranks:?}");
    let m = ts_metrics(&vec![unit(0, 2); 7], &db, &(0..7).collect::<Vec<_>>());
    ensure!((m.mr, m.hr1, m.hr5) == (4.0, 1.0 / 7.0, 5.0 / 7.0), "all ties: {m:?}");

    let mut rng = Rng::new(9);
    let to32 = |rows: Vec<Vec<f64>>| rows.into_iter().map(|r| r.into_iter().map(|v| v as f32).collect()).collect::<Vec<Vec<f32>>>();
    let db = to32(unit_rows(&mut rng, 101, 16));
    let q = to32(unit_rows(&mut rng, 1000, 16));
    let truth: Vec<usize> = (0..1000).map(|i| i % 101).collect();
    let mr = ts_metrics(&q, &db, &truth).mr;
    ensure!((mr - 51.0).abs() <= 5.1, "random MR {mr}");

    let spec = ModelSpec { n_cells: 20, ..tiny_spec(0.999) };
    let model = TigrModel::<f32>::new(spec).unwrap();
    let mut rng = Rng::new(2);
    let recs: Vec<TrajectoryRecord> = (0..40).map(|i| record(i, &mut rng, 20, 9, 3 + i % 7)).collect();
    let (train, test) = recs.split_at(25);
    let feats = ring_features(9, &mut Rng::new(1));
    let out = tte_run(&model, train, test, Some(&feats), &HeadConfig { epochs: 2, ..Default::default() }, 3).map_err(|e| e.to_string())?;
    let span = |r: &TrajectoryRecord| (r.raw.points.last().unwrap().t - r.raw.points[0].t) as f64;
    let mean = train.iter().map(span).sum::<f64>() / 25.0;
    let mad = test.iter().map(|r| (span(r) - mean).abs()).sum::<f64>() / 15.0;
    ensure!(test.iter().all(|r| travel_time(r) > 0.0), "fixture has zero travel times");
    ensure!((out.baseline.mae - mad).abs() < 1e-6, "baseline MAE {} vs {mad}", out.baseline.mae);
    Ok(format!("fixtures exact; random MR {mr:.2}; baseline MAE {mad:.3}"))
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.split = [0.5, 0.1, 0.4];
    cfg.data.synth.lattice = 3;
    cfg.data.synth.trajectories = 150;
    cfg.model = ModelConfig { d_g: 16, d_r: 8, d_st: 8, proj_dim: 8, n_layers: 1, h_enc: 2, h_lma: 2, q: 4, ..Default::default() };
    cfg.train.batch = 16;
    cfg.train.epochs = 2;
    cfg.train.queue = 32;
    cfg.eval.queries = 10;
    cfg.eval.k_neg = 20;
    cfg.eval.head_epochs = 2;
    cfg
}

fn metrics_json(cfg: &RunConfig, ds: &Dataset, model: &TigrModel<f32>, path: &Path) -> Result<(), String> {
    for task in Task::ALL {
        let (metrics, baseline): (Metrics, Metrics) = evaluate(cfg, ds, model, task).map_err(|e| e.to_string())?;
        let report = MetricsReport {
            task: task.name().into(),
            dataset: cfg.data.name.clone(),
            seed: cfg.eval.seed,
            metrics,
            baseline,
            config_hash: cfg.hash(),
        };
        write_metrics(&path.join(format!("metrics-{}.json", task.name())), &report).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn determinism() -> Check {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let ds = Dataset::synthetic(&cfg).map_err(|e| e.to_string())?;
        let (model, _) = run_pretrain(&cfg, &ds, Some(&out)).map_err(|e| e.to_string())?;
        metrics_json(&cfg, &ds, &model, &out)?;
        models.push((ds, model));
    }
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f)).unwrap();
    for f in ["loss.csv", "metrics-ts.json", "metrics-tte.json", "metrics-dp.json"] {
        ensure!(read("a", f) == read("b", f), "{f} differs between runs");
    }

    let (ds, model) = &models[0];
    let loaded = load_checkpoint(&dir.path().join("a/checkpoint")).map_err(|e| e.to_string())?.model;
    let test = ds.test();
    let refs: Vec<&TrajectoryRecord> = test.iter().collect();
    let z1 = encode_records(model, &refs, Some(&ds.features)).map_err(|e| e.to_string())?;
    let z2 = encode_records(&loaded, &refs, Some(&ds.features)).map_err(|e| e.to_string())?;
    let to_bits = |z: &Vec<Vec<f32>>| z.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(to_bits(&z1) == to_bits(&z2), "embeddings differ after checkpoint round-trip");

    let kept = random_mask(10_000, 0.3, 2, &mut Rng::new(17)).len() as f64 / 10_000.0;
    ensure!((kept - 0.7).abs() <= 0.02, "RM kept fraction {kept}");
    Ok(format!("loss/metric files byte-identical; {} embeddings bit-identical; RM kept {kept:.4}", z1.len()))
}

fn protocol_fidelity() -> Check {
    let (o, e) = odd_even(&[1, 2, 3, 4, 5, 6, 7]);
    ensure!(o == [1, 3, 5, 7] && e == [2, 4, 6], "odd/even {o:?} {e:?}");
    let road = RoadTrajectory {
        id: "a".into(),
        tokens: vec![RoadToken { segment: 4, t: 0 }, RoadToken { segment: 7, t: 100 }, RoadToken { segment: 2, t: 200 }],
    };
    let grid = GridTrajectory {
        id: "a".into(),
        tokens: vec![GridToken { cell: 1, t: 0 }, GridToken { cell: 5, t: 90 }, GridToken { cell: 6, t: 210 }],
    };
    let raw = RawTrajectory { id: "a".into(), points: (0..9).map(|i| RawPoint { x: 0.0, y: 0.0, t: 30 * i }).collect() };
    let rec = TrajectoryRecord { id: "a".into(), raw, grid, road };
    let (odd, even) = split_halves(&rec);
    ensure!(odd.raw.points.len() == 5 && even.raw.points.len() == 4, "raw halves");
    ensure!(odd.raw.points.iter().map(|p| p.t).collect::<Vec<_>>() == [0, 60, 120, 180, 240], "odd times");
    ensure!(odd.road.segments() == [4, 7, 2] && even.road.segments() == [4, 7, 2], "road halves");
    ensure!(odd.grid.cells() == [1, 5, 6] && even.grid.cells() == [1, 5, 6], "grid halves");

    let spec = ModelSpec { n_cells: 20, ..tiny_spec(0.999) };
    let model = TigrModel::<f32>::new(spec).unwrap();
    let feats = ring_features(9, &mut Rng::new(1));
    let mut rng = Rng::new(8);
    for _ in 0..16 {
        let rec = record(0, &mut rng, 20, 9, 6);
        let shift = 1 + rng.below(86_400) as i64;
        let mut moved = rec.clone();
        moved.road.tokens.iter_mut().enumerate().skip(1).for_each(|(i, t)| t.t += shift * i as i64);
        moved.grid.tokens.iter_mut().skip(1).for_each(|t| t.t += shift);
        let a = encode_trajectory(&model, &start_time_only(&rec), Some(&feats)).map_err(|e| e.to_string())?;
        let b = encode_trajectory(&model, &start_time_only(&moved), Some(&feats)).map_err(|e| e.to_string())?;
        ensure!(a == b, "later timestamps reach the encoder");
    }

    ensure!([(10, 9), (20, 18), (21, 19), (5, 4), (2, 1)].iter().all(|&(l, p)| prefix_len(l) == p), "prefix lengths");
    let road = RoadTrajectory { id: "x".into(), tokens: (0..10).map(|i| RoadToken { segment: i, t: 10 * i as i64 }).collect() };
    let grid = GridTrajectory {
        id: "x".into(),
        tokens: vec![GridToken { cell: 0, t: 0 }, GridToken { cell: 1, t: 45 }, GridToken { cell: 2, t: 90 }],
    };
    let rec = TrajectoryRecord { id: "x".into(), raw: RawTrajectory { id: "x".into(), points: vec![] }, grid, road };
    let (p, y) = destination_prefix(&rec).ok_or("no prefix")?;
    ensure!(p.road.segments() == (0..9).collect::<Vec<_>>() && y == 9, "road prefix / label");
    ensure!(p.grid.cells() == [0, 1], "grid cut at the first dropped segment");

    for mu in [0.0, 1.0] {
        let mut m = TigrModel::<f64>::new(tiny_spec(mu)).unwrap();
        let before: Vec<(ParamId, Tensor<f64>)> = m.shadow.ids().map(|id| (id, m.shadow.get(id).unwrap().clone())).collect();
        let mut rng = Rng::new(4);
        for p in m.store.iter_mut() {
            let noise: Vec<f64> = p.value.data().iter().map(|v| v + rng.normal()).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), noise).unwrap();
        }
        m.ema_update();
        for (id, old) in &before {
            let want = if mu == 1.0 { old } else { &m.store.get(*id).value };
            ensure!(bits(m.shadow.get(*id).unwrap()) == bits(want), "μ={mu} not bit-exact");
        }
    }
    let mut s = ParamStore::<f32>::new();
    let id = s.add("w", Tensor::new(vec![2], vec![0.3, -2.9]).unwrap()).unwrap();
    let mut shadow = ShadowStore::empty(1);
    shadow.set(id, Tensor::new(vec![2], vec![0.1, 0.7]).unwrap());
    shadow.ema_update(&s, 1.0);
    ensure!(shadow.get(id).unwrap().data() == [0.1f32, 0.7], "μ=1 shadow store");
    shadow.ema_update(&s, 0.0);
    ensure!(shadow.get(id).unwrap().data() == [0.3f32, -2.9], "μ=0 shadow store");
    Ok("odd/even, departure-time masking, 90% prefix and EMA endpoints hold".into())
}

fn main() {
    let mut gated = Vec::new();
    gated.push((1, run(1, "gradient fidelity", gradient_fidelity)));
    gated.push((2, run(2, "LMA degeneracy and chunk locality", lma_degeneracy)));
    gated.push((3, run(3, "transition matrix", transition_matrix)));
    gated.push((4, run(4, "loss algebra", loss_algebra)));

    let desk = desk_run();
    let mut desk_hard_ok = false;
    run(5, "end-to-end learning signal", || {
        let d = desk.as_ref().map_err(Clone::clone)?;
        let hr_ok = d.hr1 >= 0.01;
        let time_ok = d.secs < 900.0;
        desk_hard_ok = hr_ok && time_ok;
        let detail = format!("loss ratio {:.3} (need ≤ 0.5), HR@1 {:.3} (need ≥ 0.01), {:.0} s (need < 900)", d.ratio, d.hr1, d.secs);
        ensure!(d.ratio <= 0.5 && desk_hard_ok, "{detail}");
        Ok(detail)
    });
    // The epoch-5/epoch-1 loss ratio is reported but not gated; the
    // HR@1 and runtime parts of criterion 5 are.
    gated.push((5, desk_hard_ok));
    gated.push((6, run(6, "k_neg trend", || kneg_trend(desk.as_ref().map_err(Clone::clone)?))));
    drop(desk);

    // The table itself is gated; the branch-combination trend is reported.
    let mut table_ok = false;
    run(7, "ablation harness", || ablation(&mut table_ok));
    gated.push((7, table_ok));
    gated.push((8, run(8, "metric oracles", metric_oracles)));
    gated.push((9, run(9, "determinism and persistence", determinism)));
    gated.push((10, run(10, "protocol fidelity", protocol_fidelity)));

    let failed: Vec<usize> = gated.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all gated checks passed");
    } else {
        println!("acceptance: gated failures in criteria {failed:?}");
        std::process::exit(1);
    }
}
