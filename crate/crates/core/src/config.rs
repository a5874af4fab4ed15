//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::downstream::HeadConfig;
use crate::encoder::{Ablation, ModelConfig};
use crate::error::{Result, TigrError};
use crate::masking::MaskingConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Name recorded in metric files.
    pub name: String,
    /// Seed for the synthetic generator and the split.
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub min_points: usize,
    pub max_points: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            name: "synthetic".into(),
            seed: 7,
            split: [0.6, 0.2, 0.2],
            min_points: crate::data::MIN_POINTS,
            max_points: crate::data::MAX_POINTS,
            synth: SynthConfig::default(),
        }
    }
}

/// Bounding box and cell size for externally supplied data. Synthetic
/// datasets carry their own grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cell_size_m: f64,
    /// `[min_lon, min_lat, max_lon, max_lat]`; derived from the data when empty.
    pub bbox: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cell_size_m: 200.0,
            bbox: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Similarity-search queries.
    pub queries: usize,
    pub k_neg: usize,
    pub kneg_sweep: Vec<usize>,
    /// Matches written by the similar-trajectory export.
    pub export_k: usize,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub head_batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            queries: 10_000,
            k_neg: 10_000,
            kneg_sweep: vec![100, 500, 1000, 2000],
            export_k: 500,
            head_epochs: 30,
            head_lr: 1e-3,
            head_batch: 64,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            epochs: self.head_epochs,
            lr: self.head_lr,
            batch: self.head_batch,
            hidden: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    /// Full-size settings.
    pub fn paper() -> Self {
        RunConfig::default()
    }

    /// Laptop-sized settings: halved widths, batch 64, five epochs and a
    /// split leaving enough test trajectories for 500 queries with 2000
    /// distractors.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.data.split = [0.4, 0.05, 0.55];
        c.model.d_g = 128;
        c.model.d_r = 64;
        c.model.d_st = 64;
        c.model.proj_dim = 64;
        c.train.batch = 64;
        c.train.epochs = 5;
        c.train.seed = 7;
        c.eval.queries = 500;
        c.eval.k_neg = 500;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(TigrError::config("profile", format!("unknown profile {other:?}; expected paper or desk"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TigrError::Config {
            key: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TigrError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TigrError::Config { key, reason } => TigrError::Parse {
                path: path.display().to_string(),
                line: 0,
                reason: format!("{key}: {reason}"),
            },
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TigrError::config("data.split", "fractions must be in [0, 1] and sum to 1"));
        }
        if self.data.min_points > self.data.max_points {
            return Err(TigrError::config("data.min_points", "exceeds data.max_points"));
        }
        if !(self.grid.cell_size_m > 0.0) {
            return Err(TigrError::config("grid.cell_size_m", "must be positive"));
        }
        if !(self.grid.bbox.is_empty() || self.grid.bbox.len() == 4) {
            return Err(TigrError::config("grid.bbox", "needs four numbers"));
        }
        if self.eval.queries == 0 {
            return Err(TigrError::config("eval.queries", "must be positive"));
        }
        self.model.validate()?;
        self.masking.validate()?;
        self.train.validate()?;
        self.eval.head().validate()
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Every key with its default, one `section.key = value` per line.
    pub fn key_listing(&self) -> String {
        let value = toml::Value::try_from(self).expect("configuration serialises");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.join("\n")
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
