use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};
use crate::numerics::{Adam, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Optimisation settings for a downstream head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Hidden width; the input width when absent.
    pub hidden: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 30,
            lr: 1e-3,
            batch: 64,
            hidden: None,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TigrError::config("eval.head_epochs", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TigrError::config("eval.head_lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(TigrError::config("eval.head_batch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTask {
    /// One output trained with squared error.
    Regression,
    /// One logit per class trained with cross-entropy.
    Classes(usize),
}

impl HeadTask {
    fn outputs(self) -> usize {
        match self {
            HeadTask::Regression => 1,
            HeadTask::Classes(n) => n,
        }
    }
}

/// Two affine maps with a SiLU between them, trained on frozen embeddings.
pub struct HeadModel {
    pub task: HeadTask,
    store: ParamStore<f32>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

enum Targets<'a> {
    Values(&'a [f64]),
    Classes(&'a [usize]),
}

impl HeadModel {
    pub fn new(input: usize, task: HeadTask, cfg: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.hidden.unwrap_or(input);
        let out = task.outputs();
        if input == 0 || hidden == 0 || out == 0 {
            return Err(TigrError::Contract("head widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        Ok(HeadModel {
            task,
            w1: store.add_xavier("head.w1", input, hidden, rng)?,
            b1: store.add("head.b1", Tensor::zeros(&[hidden]))?,
            w2: store.add_xavier("head.w2", hidden, out, rng)?,
            b2: store.add("head.b2", Tensor::zeros(&[out]))?,
            store,
        })
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w1, Some(self.b1))?;
        let h = g.silu(h);
        g.linear(h, self.w2, Some(self.b2))
    }

    /// Trains on `(x, y)` and returns the mean loss of each epoch.
    pub fn fit_values(&mut self, x: &[Vec<f32>], y: &[f64], cfg: &HeadConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        if self.task != HeadTask::Regression {
            return Err(TigrError::Contract("fit_values on a classification head".into()));
        }
        self.fit(x, Targets::Values(y), cfg, rng)
    }

    pub fn fit_classes(&mut self, x: &[Vec<f32>], y: &[usize], cfg: &HeadConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        if self.task == HeadTask::Regression {
            return Err(TigrError::Contract("fit_classes on a regression head".into()));
        }
        self.fit(x, Targets::Classes(y), cfg, rng)
    }

    fn fit(&mut self, x: &[Vec<f32>], y: Targets<'_>, cfg: &HeadConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        cfg.validate()?;
        let n = match y {
            Targets::Values(v) => v.len(),
            Targets::Classes(c) => c.len(),
        };
        if n != x.len() || n == 0 {
            return Err(TigrError::Data(format!("head training needs matching nonempty inputs and labels, got {} and {n}", x.len())));
        }
        let mut adam = Adam::new(&self.store, cfg.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch) {
                let rows: Vec<Vec<f32>> = idx.iter().map(|&i| x[i].clone()).collect();
                let grads = {
                    let mut g = Graph::new(&self.store);
                    let xv = g.constant(Tensor::from_rows(&rows)?);
                    let out = self.forward(&mut g, xv)?;
                    let loss = match y {
                        Targets::Values(v) => g.mse(out, &idx.iter().map(|&i| v[i]).collect::<Vec<_>>())?,
                        Targets::Classes(c) => g.cross_entropy(out, &idx.iter().map(|&i| c[i]).collect::<Vec<_>>())?,
                    };
                    let l = g.value(loss).item() as f64;
                    if !l.is_finite() {
                        return Err(TigrError::NonFinite("head loss".into()));
                    }
                    total += l * idx.len() as f64;
                    g.backward(loss)?.params
                };
                self.store.accumulate(&grads);
                adam.step(&mut self.store, None)?;
            }
            history.push(total / n as f64);
        }
        Ok(history)
    }

    /// Raw outputs, one row per input.
    pub fn predict(&self, x: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(1024) {
            let mut g = Graph::frozen(&self.store);
            let xv = g.constant(Tensor::from_rows(chunk)?);
            let y = self.forward(&mut g, xv)?;
            let v = g.value(y);
            out.extend((0..v.rows()).map(|i| v.row(i).iter().map(|&a| a as f64).collect()));
        }
        Ok(out)
    }
}
