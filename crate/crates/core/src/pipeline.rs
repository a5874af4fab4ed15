//! End-to-end stages shared by the command-line tool and the tests:
//! dataset assembly, pretraining, evaluation, ablations and run manifests.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::io::{
    load_grid_spec, load_matched_csv, load_raw_csv, load_road_network, write_grid_spec, write_matched_csv,
    write_raw_csv, write_road_network,
};
use crate::data::{
    filter_trajectories, map_to_grid, split_dataset, synth_generate, DatasetSplit, FilterReport, GridSpec, RawTrajectory,
    RoadNetwork, RoadTrajectory, TrajectoryRecord,
};
use crate::downstream::{split_halves, SweepRow, dp_run, ts_build, ts_evaluate, tte_run, DpOutcome, Metrics, TsInstance, TsMetrics, TteOutcome};
use crate::encoder::{Ablation, BranchSet, ModelSpec, TigrModel};
use crate::error::{Result, TigrError};
use crate::masking::{MaskKind, MaskingConfig, ViewConfig};
use crate::numerics::Rng;
use crate::spatiotemporal::{TrafficFeatures, TrafficMatrix, TransitionMatrix};
use crate::training::{pretrain, PretrainOutput};

pub const SEGMENTS_FILE: &str = "segments.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const RAW_FILE: &str = "raw.csv";
pub const MATCHED_FILE: &str = "matched.csv";
pub const GRID_FILE: &str = "grid.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const TRANSITION_FILE: &str = "transition.csv";
pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const REPORT_FILE: &str = "preprocess_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const SPLIT_TAG: u64 = 0x5350_4c54;
const TS_TAG: u64 = 0x5453;
const TTE_TAG: u64 = 0x5454_45;
const DP_TAG: u64 = 0x4450;

/// Preprocessed trajectories with their split and the training-split
/// traffic statistics.
pub struct Dataset {
    pub network: RoadNetwork,
    pub grid: GridSpec,
    pub records: Vec<TrajectoryRecord>,
    pub split: DatasetSplit,
    pub report: PreprocessReport,
    pub transition: TransitionMatrix,
    pub traffic: TrafficMatrix,
    pub features: TrafficFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub filter: FilterCounts,
    /// Retained raw trajectories without a matched route.
    pub unmatched: usize,
    pub records: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Largest deviation of a normalised transition row sum from 1.
    pub p_norm_row_sum_error: f64,
    pub traffic_skipped_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub input: usize,
    pub retained: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub out_of_box: usize,
}

impl From<&FilterReport> for FilterCounts {
    fn from(r: &FilterReport) -> Self {
        use crate::data::RejectReason::*;
        FilterCounts {
            input: r.input,
            retained: r.retained,
            too_short: r.count(TooShort),
            too_long: r.count(TooLong),
            out_of_box: r.count(OutOfBox),
        }
    }
}

impl Dataset {
    /// Filters, grids and splits the raw trajectories, pairs them with
    /// their matched routes and builds transition and traffic statistics
    /// from the training split. `split` overrides the configured split.
    pub fn assemble(
        cfg: &RunConfig,
        network: RoadNetwork,
        grid: GridSpec,
        raw: Vec<RawTrajectory>,
        road: Vec<RoadTrajectory>,
        split: Option<DatasetSplit>,
    ) -> Result<Self> {
        let (kept, filter) = filter_trajectories(raw, cfg.data.min_points, cfg.data.max_points, &grid);
        let mut routes: HashMap<String, RoadTrajectory> = road.into_iter().map(|r| (r.id.clone(), r)).collect();
        let mut records = Vec::with_capacity(kept.len());
        let mut unmatched = 0;
        for raw in kept {
            let (Some(road), Some(g)) = (routes.remove(&raw.id), map_to_grid(&raw, &grid)) else {
                unmatched += 1;
                continue;
            };
            if road.tokens.is_empty() {
                unmatched += 1;
                continue;
            }
            network.validate(&road)?;
            records.push(TrajectoryRecord { id: raw.id.clone(), raw, grid: g, road });
        }
        if records.len() < 2 {
            return Err(TigrError::Data(format!(
                "{} trajectories survive preprocessing; need at least 2",
                records.len()
            )));
        }
        let split = match split {
            Some(s) => s,
            None => {
                let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
                let [a, b, c] = cfg.data.split;
                split_dataset(&ids, (a, b, c), &mut Rng::new(cfg.data.seed).derive(SPLIT_TAG))?
            }
        };
        let index: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        for id in split.train.iter().chain(&split.validation).chain(&split.test) {
            if !index.contains_key(id.as_str()) {
                return Err(TigrError::Data(format!("split names unknown trajectory {id}")));
            }
        }
        let train_routes: Vec<RoadTrajectory> = split.train.iter().map(|id| records[index[id.as_str()]].road.clone()).collect();
        let transition = TransitionMatrix::build(&train_routes, &network)?;
        let traffic = TrafficMatrix::build(&train_routes, &network)?;
        let features = TrafficFeatures::new(&transition, &traffic, &network)?;
        let n = network.len();
        let p_norm_row_sum_error = (0..n)
            .map(|i| ((0..n).map(|j| transition.p_norm(i, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let report = PreprocessReport {
            filter: FilterCounts::from(&filter),
            unmatched,
            records: records.len(),
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
            p_norm_row_sum_error,
            traffic_skipped_pairs: traffic.skipped,
        };
        Ok(Dataset {
            network,
            grid,
            records,
            split,
            report,
            transition,
            traffic,
            features,
        })
    }

    /// Generates the configured synthetic dataset in memory.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let ds = synth_generate(&cfg.data.synth, &mut Rng::new(cfg.data.seed))?;
        Self::assemble(cfg, ds.network, ds.grid, ds.raw, ds.road, None)
    }

    /// Reads a data directory, using its stored split when present.
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let network = load_road_network(&dir.join(SEGMENTS_FILE), &dir.join(EDGES_FILE))?;
        let raw = load_raw_csv(&dir.join(RAW_FILE))?;
        let road = load_matched_csv(&dir.join(MATCHED_FILE), &network)?;
        let grid = match load_grid_spec(&dir.join(GRID_FILE)) {
            Ok(g) => g,
            Err(TigrError::Io { .. }) => grid_from_config(cfg, &raw)?,
            Err(e) => return Err(e),
        };
        let split_path = dir.join(SPLIT_FILE);
        let split = if split_path.exists() { Some(read_json(&split_path)?) } else { None };
        Self::assemble(cfg, network, grid, raw, road, split)
    }

    fn ids_to_records(&self, ids: &[String]) -> Vec<TrajectoryRecord> {
        let index: HashMap<&str, &TrajectoryRecord> = self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        ids.iter().map(|id| index[id.as_str()].clone()).collect()
    }

    pub fn train(&self) -> Vec<TrajectoryRecord> {
        self.ids_to_records(&self.split.train)
    }

    pub fn test(&self) -> Vec<TrajectoryRecord> {
        self.ids_to_records(&self.split.test)
    }
}

/// Grid from `[grid]`: the configured box, or the data's bounds.
fn grid_from_config(cfg: &RunConfig, raw: &[RawTrajectory]) -> Result<GridSpec> {
    let b = &cfg.grid.bbox;
    if b.len() == 4 {
        return GridSpec::new(b[0], b[1], b[2], b[3], cfg.grid.cell_size_m);
    }
    let pts = raw.iter().flat_map(|r| &r.points);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    if !x0.is_finite() {
        return Err(TigrError::Data("no raw points to derive a grid from".into()));
    }
    GridSpec::new(x0, y0, x1 + 1e-9, y1 + 1e-9, cfg.grid.cell_size_m)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| TigrError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| TigrError::io(path, e))
}

/// Generates the synthetic dataset and writes its files into `dir`.
pub fn write_synthetic(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = synth_generate(&cfg.data.synth, &mut Rng::new(cfg.data.seed))?;
    std::fs::create_dir_all(dir).map_err(|e| TigrError::io(dir, e))?;
    write_road_network(&dir.join(SEGMENTS_FILE), &dir.join(EDGES_FILE), &ds.network)?;
    write_raw_csv(&dir.join(RAW_FILE), &ds.raw)?;
    write_matched_csv(&dir.join(MATCHED_FILE), &ds.road, &ds.network)?;
    write_grid_spec(&dir.join(GRID_FILE), &ds.grid)?;
    Ok([SEGMENTS_FILE, EDGES_FILE, RAW_FILE, MATCHED_FILE, GRID_FILE].iter().map(|f| dir.join(f)).collect())
}

/// Writes the split, the traffic statistics and the report into `dir`.
pub fn write_preprocessed(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    write_json(&dir.join(SPLIT_FILE), &ds.split)?;
    ds.transition.save_csv(&dir.join(TRANSITION_FILE))?;
    ds.traffic.save_csv(&dir.join(TRAFFIC_FILE))?;
    write_json(&dir.join(REPORT_FILE), &ds.report)?;
    Ok([SPLIT_FILE, TRANSITION_FILE, TRAFFIC_FILE, REPORT_FILE].iter().map(|f| dir.join(f)).collect())
}

pub fn model_spec(cfg: &RunConfig, ds: &Dataset) -> ModelSpec {
    ModelSpec {
        config: cfg.model.clone(),
        ablation: cfg.ablation.clone(),
        n_cells: ds.grid.num_cells(),
        n_segments: ds.network.len(),
        seed: cfg.train.seed,
    }
}

/// Builds a model for `cfg` and pretrains it on the training split.
pub fn run_pretrain(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<(TigrModel<f32>, PretrainOutput)> {
    let mut model = TigrModel::new(model_spec(cfg, ds))?;
    let run = serde_json::json!({ "config": cfg, "config_hash": cfg.hash() });
    let train = ds.train();
    let output = pretrain(&mut model, &train, &cfg.train, &cfg.masking, Some(&ds.features), out, &run)?;
    Ok((model, output))
}

/// The similarity-search instance for `cfg`, sized for the largest
/// requested distractor count.
pub fn ts_instance(cfg: &RunConfig, ds: &Dataset, max_k_neg: usize) -> Result<TsInstance> {
    let mut rng = Rng::new(cfg.eval.seed).derive(TS_TAG);
    ts_build(&ds.test(), cfg.eval.queries, max_k_neg, &mut rng)
}

/// A one-query instance for `query_id` from the test split: its even half
/// followed by the even halves of up to `k_neg` other test trajectories.
pub fn export_instance(cfg: &RunConfig, ds: &Dataset, query_id: &str, k_neg: usize) -> Result<TsInstance> {
    let mut test = ds.test();
    let pos = test
        .iter()
        .position(|r| r.id == query_id)
        .ok_or_else(|| TigrError::Data(format!("query id {query_id:?} is not in the test split")))?;
    let query = test.remove(pos);
    Rng::new(cfg.eval.seed).derive(TS_TAG).shuffle(&mut test);
    let (odd, even) = split_halves(&query);
    let mut database = vec![even];
    database.extend(test.iter().take(k_neg).map(|r| split_halves(r).1));
    Ok(TsInstance {
        queries: vec![odd],
        database,
        truth: vec![0],
    })
}

pub fn eval_ts(cfg: &RunConfig, ds: &Dataset, model: &TigrModel<f32>, k_negs: &[usize]) -> Result<Vec<(usize, TsMetrics)>> {
    let max = k_negs.iter().copied().max().unwrap_or(0);
    let inst = ts_instance(cfg, ds, max)?;
    ts_evaluate(&inst, k_negs, model, Some(&ds.features))
}

pub fn eval_tte(cfg: &RunConfig, ds: &Dataset, model: &TigrModel<f32>) -> Result<TteOutcome> {
    let seed = Rng::new(cfg.eval.seed).derive(TTE_TAG).next_u64();
    tte_run(model, &ds.train(), &ds.test(), Some(&ds.features), &cfg.eval.head(), seed)
}

pub fn eval_dp(cfg: &RunConfig, ds: &Dataset, model: &TigrModel<f32>) -> Result<DpOutcome> {
    let seed = Rng::new(cfg.eval.seed).derive(DP_TAG).next_u64();
    dp_run(model, &ds.train(), &ds.test(), Some(&ds.features), &cfg.eval.head(), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ts,
    Tte,
    Dp,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ts, Task::Tte, Task::Dp];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ts => "ts",
            Task::Tte => "tte",
            Task::Dp => "dp",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = TigrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ts" => Ok(Task::Ts),
            "tte" => Ok(Task::Tte),
            "dp" => Ok(Task::Dp),
            other => Err(TigrError::config("task", format!("unknown task {other:?}; expected ts, tte or dp"))),
        }
    }
}

/// Metric and baseline maps for one task.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, model: &TigrModel<f32>, task: Task) -> Result<(Metrics, Metrics)> {
    let map = |pairs: &[(&str, f64)]| pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect::<Metrics>();
    Ok(match task {
        Task::Ts => {
            let m = eval_ts(cfg, ds, model, &[cfg.eval.k_neg])?[0].1;
            let db = (cfg.eval.queries + cfg.eval.k_neg) as f64;
            (
                map(&[("hr1", m.hr1), ("hr5", m.hr5), ("mr", m.mr)]),
                map(&[("hr1", 1.0 / db), ("hr5", (5.0 / db).min(1.0)), ("mr", (db + 1.0) / 2.0)]),
            )
        }
        Task::Tte => {
            let o = eval_tte(cfg, ds, model)?;
            let m = |t: crate::downstream::TteMetrics| map(&[("mae", t.mae), ("mape", t.mape), ("rmse", t.rmse)]);
            (m(o.metrics), m(o.baseline))
        }
        Task::Dp => {
            let o = eval_dp(cfg, ds, model)?;
            let m = |t: crate::downstream::DpMetrics| map(&[("acc1", t.acc1), ("acc5", t.acc5), ("f1", t.f1)]);
            (m(o.metrics), m(o.baseline))
        }
    })
}

/// The seven branch subsets followed by the three component removals on
/// all branches.
pub fn ablation_variants() -> Vec<Ablation> {
    let mut v: Vec<Ablation> = BranchSet::subsets()
        .into_iter()
        .map(|branches| Ablation { branches, ..Default::default() })
        .collect();
    v.push(Ablation { no_inter: true, ..Default::default() });
    v.push(Ablation { no_lma: true, ..Default::default() });
    v.push(Ablation { no_rope: true, ..Default::default() });
    v
}

/// The seven non-empty stacks of RM, TC and CM, in that order.
pub fn view_variants() -> Vec<ViewConfig> {
    use MaskKind::*;
    let kinds = [Random, Truncate, Consecutive];
    (1..8u32)
        .map(|bits| {
            let pick: Vec<MaskKind> = (0..3).filter(|i| bits & (1 << i) != 0).map(|i| kinds[i]).collect();
            ViewConfig::of(&pick)
        })
        .collect()
}

/// A view from a label such as `TC+CM`, each strategy at the default ratio.
pub fn parse_view(label: &str) -> Result<ViewConfig> {
    let kinds = label
        .split('+')
        .map(|k| match k.trim() {
            "RM" => Ok(MaskKind::Random),
            "TC" => Ok(MaskKind::Truncate),
            "CM" => Ok(MaskKind::Consecutive),
            other => Err(TigrError::config("masking", format!("unknown strategy {other:?}; expected RM, TC or CM"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewConfig::of(&kinds))
}

/// Pretrains with the given views and reports similarity search.
pub fn masking_run(cfg: &RunConfig, ds: &Dataset, view1: &ViewConfig, view2: &ViewConfig) -> Result<SweepRow> {
    let mut c = cfg.clone();
    c.masking = MaskingConfig { view1: view1.clone(), view2: view2.clone() };
    let (model, _) = run_pretrain(&c, ds, None)?;
    let m = eval_ts(&c, ds, &model, &[c.eval.k_neg])?[0].1;
    Ok(SweepRow {
        config: format!("view1={};view2={}", view1.label(), view2.label()),
        hr1: m.hr1,
        hr5: m.hr5,
        mr: m.mr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub ts_hr1: Option<f64>,
    pub ts_hr5: Option<f64>,
    pub ts_mr: Option<f64>,
    pub tte_mae: Option<f64>,
    pub tte_mape: Option<f64>,
    pub tte_rmse: Option<f64>,
    pub dp_acc1: Option<f64>,
    pub dp_acc5: Option<f64>,
    pub dp_f1: Option<f64>,
}

/// Pretrains and evaluates one variant per seed. The model and training
/// seeds are both set to the run seed.
pub fn ablation_run(cfg: &RunConfig, ds: &Dataset, variant: &Ablation, seed: u64, tasks: &[Task]) -> Result<AblationRow> {
    let mut c = cfg.clone();
    c.ablation = variant.clone();
    c.train.seed = seed;
    let (model, _) = run_pretrain(&c, ds, None)?;
    let mut row = AblationRow {
        config: variant.label(),
        seed,
        ts_hr1: None,
        ts_hr5: None,
        ts_mr: None,
        tte_mae: None,
        tte_mape: None,
        tte_rmse: None,
        dp_acc1: None,
        dp_acc5: None,
        dp_f1: None,
    };
    if tasks.contains(&Task::Ts) {
        let m = eval_ts(&c, ds, &model, &[c.eval.k_neg])?[0].1;
        (row.ts_hr1, row.ts_hr5, row.ts_mr) = (Some(m.hr1), Some(m.hr5), Some(m.mr));
    }
    if tasks.contains(&Task::Tte) {
        let m = eval_tte(&c, ds, &model)?.metrics;
        (row.tte_mae, row.tte_mape, row.tte_rmse) = (Some(m.mae), Some(m.mape), Some(m.rmse));
    }
    if tasks.contains(&Task::Dp) {
        let m = eval_dp(&c, ds, &model)?.metrics;
        (row.dp_acc1, row.dp_acc5, row.dp_f1) = (Some(m.acc1), Some(m.acc5), Some(m.f1));
    }
    log::info!("ablation {} seed {seed} done", row.config);
    Ok(row)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| TigrError::io(path, e))
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| TigrError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `git describe --always --dirty` of the working directory, or
/// `unknown` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf], started: Instant) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for p in inputs.iter().filter(|p| p.is_file()) {
            digests.insert(p.display().to_string(), file_digest(p)?);
        }
        Ok(RunManifest {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.train.seed,
            git_describe: git_describe(),
            inputs: digests,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}
