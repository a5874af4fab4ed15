use std::cell::Cell;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`ProjectionHead::forward`] calls made on this thread.
pub fn project_calls() -> usize {
    CALLS.with(Cell::get)
}

/// `x ↦ W2 · silu(W1 x + b1) + b2`, mapping `d_b → d_b → proj_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ProjectionHead {
            w1: store.add_xavier(format!("{prefix}.w1"), d, d, rng)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d]))?,
            w2: store.add_xavier(format!("{prefix}.w2"), d, out, rng)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[out]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        CALLS.with(|c| c.set(c.get() + 1));
        let h = g.linear(z, self.w1, Some(self.b1))?;
        let h = g.silu(h);
        g.linear(h, self.w2, Some(self.b2))
    }
}
