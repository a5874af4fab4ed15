use std::path::Path;

use crate::error::{Result, TigrError};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

pub const EMBED_INIT_STD: f64 = 0.02;

/// Lookup table for grid-cell or road-segment ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedder {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl TokenEmbedder {
    /// Table drawn from `N(0, 0.02²)`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, vocab: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(TigrError::config(name, "vocabulary and width must be positive"));
        }
        let table = store.add_normal(name, &[vocab, dim], EMBED_INIT_STD, rng)?;
        Ok(TokenEmbedder { table, vocab, dim })
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather(t, ids)
    }

    /// Replaces the table with externally trained vectors: one row per
    /// line, `vocab` lines of `dim` numbers separated by commas or spaces.
    pub fn load_table<T: Real>(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| TigrError::io(path, e))?;
        let mut data = Vec::with_capacity(self.vocab * self.dim);
        let mut rows = 0;
        for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: String| TigrError::Parse {
                path: path.display().to_string(),
                line: k + 1,
                reason,
            };
            let vals: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != self.dim {
                return Err(bad(format!("expected {} values, found {}", self.dim, vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            data.extend(vals);
            rows += 1;
        }
        if rows != self.vocab {
            return Err(TigrError::Data(format!(
                "{}: expected {} rows, found {rows}",
                path.display(),
                self.vocab
            )));
        }
        store.get_mut(self.table).value = Tensor::from_f64(&[self.vocab, self.dim], &data)?;
        Ok(())
    }
}
