//! Token masking strategies and their sequential stacking into views.
//!
//! Every function returns the sorted indices of the kept tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};
use crate::numerics::Rng;

pub const DEFAULT_MIN_KEEP: usize = 2;
pub const DEFAULT_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Random masking: drop each token independently.
    #[serde(rename = "RM")]
    Random,
    /// Consecutive masking: drop one contiguous run.
    #[serde(rename = "CM")]
    Consecutive,
    /// Truncation: drop a prefix or a suffix.
    #[serde(rename = "TC")]
    Truncate,
}

impl MaskKind {
    pub fn code(self) -> &'static str {
        match self {
            MaskKind::Random => "RM",
            MaskKind::Consecutive => "CM",
            MaskKind::Truncate => "TC",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingStrategy {
    pub kind: MaskKind,
    pub ratio: f64,
}

impl MaskingStrategy {
    pub fn new(kind: MaskKind, ratio: f64) -> Result<Self> {
        let s = MaskingStrategy { kind, ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(TigrError::config(
                format!("masking.{}", self.kind.code()),
                format!("ratio {} outside (0, 1)", self.ratio),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub strategies: Vec<MaskingStrategy>,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
}

fn default_min_keep() -> usize {
    DEFAULT_MIN_KEEP
}

impl ViewConfig {
    pub fn identity() -> Self {
        ViewConfig {
            strategies: Vec::new(),
            min_keep: DEFAULT_MIN_KEEP,
        }
    }

    /// The given strategies, in order, each at the default ratio.
    pub fn of(kinds: &[MaskKind]) -> Self {
        ViewConfig {
            strategies: kinds
                .iter()
                .map(|&kind| MaskingStrategy {
                    kind,
                    ratio: DEFAULT_RATIO,
                })
                .collect(),
            min_keep: DEFAULT_MIN_KEEP,
        }
    }

    /// `[TC, CM]` at ratio 0.3.
    pub fn view1() -> Self {
        Self::of(&[MaskKind::Truncate, MaskKind::Consecutive])
    }

    /// `[RM, TC, CM]` at ratio 0.3.
    pub fn view2() -> Self {
        Self::of(&[MaskKind::Random, MaskKind::Truncate, MaskKind::Consecutive])
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_keep < 1 {
            return Err(TigrError::config("masking.min_keep", "must be at least 1"));
        }
        self.strategies.iter().try_for_each(MaskingStrategy::validate)
    }

    /// Short label such as `TC+CM`, or `none`.
    pub fn label(&self) -> String {
        if self.strategies.is_empty() {
            return "none".into();
        }
        self.strategies.iter().map(|s| s.kind.code()).collect::<Vec<_>>().join("+")
    }
}

/// The two views contrasted during pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub view1: ViewConfig,
    pub view2: ViewConfig,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            view1: ViewConfig::view1(),
            view2: ViewConfig::view2(),
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        self.view1.validate()?;
        self.view2.validate()
    }
}

/// Number of tokens a run-based strategy removes: `floor(p·len)`, capped so
/// at least `min_keep` survive.
fn run_length(len: usize, p: f64, min_keep: usize) -> usize {
    ((p * len as f64).floor() as usize).min(len.saturating_sub(min_keep))
}

pub fn random_mask(len: usize, p: f64, min_keep: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keep: Vec<bool> = (0..len).map(|_| !rng.bernoulli(p)).collect();
    let target = min_keep.min(len);
    let mut kept = keep.iter().filter(|&&k| k).count();
    while kept < target {
        let dropped: Vec<usize> = (0..len).filter(|&i| !keep[i]).collect();
        keep[dropped[rng.below(dropped.len())]] = true;
        kept += 1;
    }
    (0..len).filter(|&i| keep[i]).collect()
}

pub fn consecutive_mask(len: usize, p: f64, min_keep: usize, rng: &mut Rng) -> Vec<usize> {
    let n = run_length(len, p, min_keep);
    if n == 0 {
        return (0..len).collect();
    }
    let start = rng.below(len - n + 1);
    (0..start).chain(start + n..len).collect()
}

pub fn truncate(len: usize, p: f64, min_keep: usize, rng: &mut Rng) -> Vec<usize> {
    let n = run_length(len, p, min_keep);
    if n == 0 {
        return (0..len).collect();
    }
    if rng.bernoulli(0.5) {
        (n..len).collect()
    } else {
        (0..len - n).collect()
    }
}

/// Applies the strategies in order, each to the survivors of the previous.
pub fn apply_view(len: usize, cfg: &ViewConfig, rng: &mut Rng) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..len).collect();
    for s in &cfg.strategies {
        let local = match s.kind {
            MaskKind::Random => random_mask(kept.len(), s.ratio, cfg.min_keep, rng),
            MaskKind::Consecutive => consecutive_mask(kept.len(), s.ratio, cfg.min_keep, rng),
            MaskKind::Truncate => truncate(kept.len(), s.ratio, cfg.min_keep, rng),
        };
        kept = local.into_iter().map(|i| kept[i]).collect();
    }
    kept
}

/// Selects `items[kept]`.
pub fn select<T: Clone>(items: &[T], kept: &[usize]) -> Vec<T> {
    kept.iter().map(|&i| items[i].clone()).collect()
}
