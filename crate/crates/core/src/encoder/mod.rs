//! Token embedders, the pre-norm transformer encoder, projection heads, the
//! three-branch model with its EMA target, and checkpoints.

mod checkpoint;
mod embed;
mod head;
mod model;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use embed::{TokenEmbedder, EMBED_INIT_STD};
pub use head::{project_calls, ProjectionHead};
pub use model::{BranchBatch, BranchInput, BranchModel, ModelSpec, TigrModel};
pub use transformer::{encode_batch, encoder_forward, pool_means, EncoderLayer, EncoderParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "g")]
    Grid,
    #[serde(rename = "r")]
    Road,
    #[serde(rename = "st")]
    St,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Grid, Branch::Road, Branch::St];

    pub fn code(self) -> &'static str {
        match self {
            Branch::Grid => "g",
            Branch::Road => "r",
            Branch::St => "st",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Grid => "grid",
            Branch::Road => "road",
            Branch::St => "st",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A non-empty subset of branches, written `g+r+st`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BranchSet(Vec<Branch>);

impl BranchSet {
    pub fn all() -> Self {
        BranchSet(Branch::ALL.to_vec())
    }

    pub fn new(mut branches: Vec<Branch>) -> Result<Self> {
        branches.sort();
        branches.dedup();
        if branches.is_empty() {
            return Err(TigrError::config("ablation.branches", "at least one branch is required"));
        }
        Ok(BranchSet(branches))
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.0.contains(&b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The seven non-empty subsets, singles first.
    pub fn subsets() -> Vec<BranchSet> {
        use Branch::*;
        [vec![Grid], vec![Road], vec![St], vec![Grid, Road], vec![Grid, St], vec![Road, St], vec![Grid, Road, St]]
            .into_iter()
            .map(BranchSet)
            .collect()
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|b| b.code()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for BranchSet {
    type Err = TigrError;

    fn from_str(s: &str) -> Result<Self> {
        let branches = s
            .split('+')
            .map(|p| match p.trim() {
                "g" => Ok(Branch::Grid),
                "r" => Ok(Branch::Road),
                "st" => Ok(Branch::St),
                other => Err(TigrError::config(
                    "ablation.branches",
                    format!("unknown branch {other:?}; expected g, r or st joined by '+'"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        BranchSet::new(branches)
    }
}

impl Serialize for BranchSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BranchSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_g: usize,
    pub d_r: usize,
    pub d_st: usize,
    /// Output width of every projection head, shared so that projections
    /// of different branches can be contrasted.
    pub proj_dim: usize,
    pub n_layers: usize,
    pub h_enc: usize,
    pub h_lma: usize,
    pub ffn_ratio: usize,
    /// Width of the cosine time embedding.
    pub q: usize,
    pub mu: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_g: 256,
            d_r: 128,
            d_st: 128,
            proj_dim: 128,
            n_layers: 2,
            h_enc: 8,
            h_lma: 4,
            ffn_ratio: 4,
            q: 32,
            mu: 0.99,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn width(&self, b: Branch) -> usize {
        match b {
            Branch::Grid => self.d_g,
            Branch::Road => self.d_r,
            Branch::St => self.d_st,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, d) in [("model.d_g", self.d_g), ("model.d_r", self.d_r), ("model.d_st", self.d_st)] {
            if d == 0 || self.h_enc == 0 || d % self.h_enc != 0 {
                return Err(TigrError::config(key, format!("{d} must be a positive multiple of h_enc = {}", self.h_enc)));
            }
        }
        if self.d_st % 2 != 0 {
            return Err(TigrError::config("model.d_st", "must be even"));
        }
        let zero = [
            ("model.proj_dim", self.proj_dim),
            ("model.n_layers", self.n_layers),
            ("model.h_lma", self.h_lma),
            ("model.ffn_ratio", self.ffn_ratio),
        ];
        if let Some((key, _)) = zero.iter().find(|(_, v)| *v == 0) {
            return Err(TigrError::config(*key, "must be positive"));
        }
        if self.q < 2 {
            return Err(TigrError::config("model.q", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(TigrError::config("model.mu", format!("{} outside [0, 1]", self.mu)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TigrError::config("model.dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Branch subset and component removals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub branches: BranchSet,
    /// Train with the intra-branch loss only.
    pub no_inter: bool,
    /// Every spatio-temporal attention head attends the whole sequence.
    pub no_lma: bool,
    pub no_rope: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            branches: BranchSet::all(),
            no_inter: false,
            no_lma: false,
            no_rope: false,
        }
    }
}

impl Ablation {
    /// Short label such as `g+r`, `no_inter`, or `g+r+st`.
    pub fn label(&self) -> String {
        let mut parts = vec![self.branches.to_string()];
        for (on, name) in [(self.no_inter, "no_inter"), (self.no_lma, "no_lma"), (self.no_rope, "no_rope")] {
            if on {
                parts.push(name.into());
            }
        }
        parts.join(",")
    }
}
