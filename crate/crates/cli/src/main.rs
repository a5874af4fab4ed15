use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tigr::config::RunConfig;
use tigr::downstream::{
    encode_records, export_similar_geojson, write_embeddings, write_metrics, write_sweep_csv, MetricsReport, SweepRow,
    TrajectoryRepresentation,
};
use tigr::encoder::load_checkpoint;
use tigr::pipeline::{
    ablation_run, ablation_variants, eval_ts, evaluate, export_instance, masking_run, parse_view, run_pretrain,
    view_variants, write_ablation_csv, write_json, write_preprocessed, write_synthetic, Dataset, RunManifest, Task,
    EDGES_FILE, GRID_FILE, MATCHED_FILE, RAW_FILE, SEGMENTS_FILE,
};

/// Environment variable naming the directory that relative output paths
/// are resolved against.
const OUTPUT_ROOT_ENV: &str = "TIGR_OUTPUT_ROOT";

fn key_listing() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Configuration keys (defaults of the paper profile):\n{}\n\nRelative output paths are resolved under ${OUTPUT_ROOT_ENV} when set.",
            RunConfig::paper().key_listing()
        )
    })
}

#[derive(Parser)]
#[command(name = "tigr", version, about = "Trajectory representation learning with grid, road and spatio-temporal branches")]
#[command(after_long_help = key_listing())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file overlaid on the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings: `desk` (laptop sized) or `paper`.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic lattice dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, grid and split a data directory and build traffic statistics.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive pretraining; writes the loss log and checkpoints.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write frozen embeddings of one split.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, validation, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Evaluate a checkpoint on a downstream task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["ts", "tte", "dp"])]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Distractor counts for a similarity-search sweep.
        #[arg(long, value_delimiter = ',')]
        kneg_sweep: Option<Vec<usize>>,
    },
    /// Pretrain and evaluate every branch subset and component removal.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "ts,tte,dp")]
        tasks: Vec<String>,
    },
    /// Pretrain with each pair of view masking stacks and report similarity search.
    MaskSweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// View 1 stacks such as TC+CM; all seven when absent.
        #[arg(long, value_delimiter = ',')]
        view1: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        view2: Option<Vec<String>>,
    },
    /// GeoJSON of a query trajectory and its most similar database entries.
    ExportSimilar {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        /// Matches to include; eval.export_k when absent.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let base = RunConfig::profile(&g.profile)?;
    let Some(path) = &g.config else { return Ok(base) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut doc = toml::Value::try_from(&base)?;
    merge(&mut doc, over);
    Ok(RunConfig::from_toml(&toml::to_string(&doc)?).with_context(|| format!("in {}", path.display()))?)
}

/// The configuration stored with a checkpoint, unless one was given.
fn checkpoint_config(g: &Global, run: &serde_json::Value) -> Result<RunConfig> {
    if g.config.is_some() {
        return load_config(g);
    }
    match run.get("config") {
        Some(c) => Ok(serde_json::from_value(c.clone()).context("checkpoint configuration")?),
        None => load_config(g),
    }
}

fn data_inputs(dir: &Path) -> Vec<PathBuf> {
    [SEGMENTS_FILE, EDGES_FILE, RAW_FILE, MATCHED_FILE, GRID_FILE].iter().map(|f| dir.join(f)).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let g = &cli.global;
    match cli.command {
        Command::Synth { out } => {
            let cfg = load_config(g)?;
            let out = output_path(&out);
            let files = write_synthetic(&cfg, &out)?;
            RunManifest::new("synth", &cfg, &[], &files, started)?.write(&out)?;
            println!("wrote {} trajectories to {}", cfg.data.synth.trajectories, out.display());
        }
        Command::Preprocess { data } => {
            let cfg = load_config(g)?;
            let ds = Dataset::load(&cfg, &data)?;
            let files = write_preprocessed(&ds, &data)?;
            RunManifest::new("preprocess", &cfg, &data_inputs(&data), &files, started)?.write(&data)?;
            let r = &ds.report;
            println!(
                "retained {}/{} (too_short {}, too_long {}, out_of_box {}), unmatched {}",
                r.filter.retained, r.filter.input, r.filter.too_short, r.filter.too_long, r.filter.out_of_box, r.unmatched
            );
            println!("split train {} / validation {} / test {}", r.train, r.validation, r.test);
            println!("p_norm row-sum max deviation {:.3e}", r.p_norm_row_sum_error);
        }
        Command::Pretrain { data, out, epochs } => {
            let mut cfg = load_config(g)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let ds = Dataset::load(&cfg, &data)?;
            let out = output_path(&out);
            create_dir(&out)?;
            let (model, res) = run_pretrain(&cfg, &ds, Some(&out))?;
            write_json(&out.join("parameters.json"), &model.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>())?;
            let outputs = vec![out.join("loss.csv"), out.join("checkpoint"), out.join("parameters.json")];
            RunManifest::new("pretrain", &cfg, &data_inputs(&data), &outputs, started)?.write(&out)?;
            for (e, m) in res.epoch_means.iter().enumerate() {
                println!("epoch {} mean loss {m:.6}", e + 1);
            }
        }
        Command::Embed { checkpoint, data, out, split } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(g, &ck.run)?;
            let ds = Dataset::load(&cfg, &data)?;
            let records = match split.as_str() {
                "train" => ds.train(),
                "test" => ds.test(),
                "validation" => ds.records.iter().filter(|r| ds.split.validation.contains(&r.id)).cloned().collect(),
                "all" => ds.records.clone(),
                other => bail!("unknown split {other:?}; expected train, validation, test or all"),
            };
            let refs: Vec<_> = records.iter().collect();
            let z = encode_records(&ck.model, &refs, Some(&ds.features))?;
            let reps: Vec<TrajectoryRepresentation> =
                records.iter().zip(z).map(|(r, z)| TrajectoryRepresentation { id: r.id.clone(), z }).collect();
            let out = output_path(&out);
            let dir = parent_dir(&out);
            create_dir(&dir)?;
            write_embeddings(&out, &reps)?;
            RunManifest::new("embed", &cfg, &data_inputs(&data), std::slice::from_ref(&out), started)?.write(&dir)?;
            println!("wrote {} embeddings of width {} to {}", reps.len(), ck.model.embedding_dim(), out.display());
        }
        Command::Eval { checkpoint, data, task, out, kneg_sweep } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(g, &ck.run)?;
            let task: Task = task.parse()?;
            let ds = Dataset::load(&cfg, &data)?;
            let out = output_path(&out);
            create_dir(&out)?;
            let mut outputs = Vec::new();
            if let Some(ks) = kneg_sweep {
                if task != Task::Ts {
                    bail!("--kneg-sweep applies to --task ts only");
                }
                let rows: Vec<SweepRow> = eval_ts(&cfg, &ds, &ck.model, &ks)?
                    .into_iter()
                    .map(|(k, m)| SweepRow { config: format!("k_neg={k}"), hr1: m.hr1, hr5: m.hr5, mr: m.mr })
                    .collect();
                let path = out.join("kneg_sweep.csv");
                write_sweep_csv(&path, &rows)?;
                for r in &rows {
                    println!("{} HR@1 {:.4} HR@5 {:.4} MR {:.3}", r.config, r.hr1, r.hr5, r.mr);
                }
                outputs.push(path);
            } else {
                let (metrics, baseline) = evaluate(&cfg, &ds, &ck.model, task)?;
                let report = MetricsReport {
                    task: task.name().into(),
                    dataset: cfg.data.name.clone(),
                    seed: cfg.train.seed,
                    metrics,
                    baseline,
                    config_hash: cfg.hash(),
                };
                let path = out.join(format!("metrics-{}.json", task.name()));
                write_metrics(&path, &report)?;
                for (k, v) in &report.metrics {
                    println!("{k} {v:.6} (baseline {:.6})", report.baseline[k]);
                }
                outputs.push(path);
            }
            let mut inputs = data_inputs(&data);
            inputs.push(checkpoint.join("params.bin"));
            RunManifest::new("eval", &cfg, &inputs, &outputs, started)?.write(&out)?;
        }
        Command::Ablate { data, out, seeds, tasks } => {
            let cfg = load_config(g)?;
            let tasks = tasks.iter().map(|t| t.parse()).collect::<tigr::Result<Vec<Task>>>()?;
            let ds = Dataset::load(&cfg, &data)?;
            let out = output_path(&out);
            create_dir(&out)?;
            let mut rows = Vec::new();
            for variant in ablation_variants() {
                for &seed in &seeds {
                    rows.push(ablation_run(&cfg, &ds, &variant, seed, &tasks)?);
                }
            }
            let path = out.join("ablation.csv");
            write_ablation_csv(&path, &rows)?;
            RunManifest::new("ablate", &cfg, &data_inputs(&data), std::slice::from_ref(&path), started)?.write(&out)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::MaskSweep { data, out, view1, view2 } => {
            let cfg = load_config(g)?;
            let views = |labels: Option<Vec<String>>| -> Result<Vec<_>> {
                match labels {
                    Some(l) => l.iter().map(|s| parse_view(s).map_err(Into::into)).collect(),
                    None => Ok(view_variants()),
                }
            };
            let (v1, v2) = (views(view1)?, views(view2)?);
            let ds = Dataset::load(&cfg, &data)?;
            let out = output_path(&out);
            create_dir(&out)?;
            let mut rows = Vec::new();
            for a in &v1 {
                for b in &v2 {
                    let row = masking_run(&cfg, &ds, a, b)?;
                    println!("{} HR@1 {:.4}", row.config, row.hr1);
                    rows.push(row);
                }
            }
            let path = out.join("masking_sweep.csv");
            write_sweep_csv(&path, &rows)?;
            RunManifest::new("mask-sweep", &cfg, &data_inputs(&data), std::slice::from_ref(&path), started)?.write(&out)?;
        }
        Command::ExportSimilar { checkpoint, data, query, k, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(g, &ck.run)?;
            let ds = Dataset::load(&cfg, &data)?;
            let k = k.unwrap_or(cfg.eval.export_k);
            let inst = export_instance(&cfg, &ds, &query, cfg.eval.k_neg.max(k))?;
            let value = export_similar_geojson(&query, k, &inst, &ck.model, Some(&ds.features), &ds.network)?;
            let out = output_path(&out);
            let dir = parent_dir(&out);
            create_dir(&dir)?;
            write_json(&out, &value)?;
            RunManifest::new("export-similar", &cfg, &data_inputs(&data), std::slice::from_ref(&out), started)?.write(&dir)?;
            println!("wrote {} features to {}", value["features"].as_array().map_or(0, Vec::len), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
