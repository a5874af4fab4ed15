use super::NegativeQueue;
use crate::encoder::Branch;
use crate::error::{Result, TigrError};
use crate::numerics::{Graph, Real, Var};

/// InfoNCE with the positive included in the denominator:
/// `mean_i −log( e^{q_i·p_i/τ} / (e^{q_i·p_i/τ} + Σ_j e^{q_i·n_j/τ}) )`.
///
/// Rows of `query` and `positive` must already be unit length; queue
/// entries enter as constants. With an empty queue the loss is exactly 0.
pub fn info_nce<T: Real>(g: &mut Graph<T>, query: Var, positive: Var, queue: &NegativeQueue<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TigrError::config("train.tau", "temperature must be positive"));
    }
    let b = g.value(query).rows();
    let prod = g.mul(query, positive)?;
    let pos = g.sum_cols(prod)?;
    let logits = match queue.to_tensor() {
        Some(n) => {
            let n = g.constant(n);
            let neg = g.matmul_nt(query, n)?;
            g.concat_cols(&[pos, neg])?
        }
        None => pos,
    };
    let logits = g.scale(logits, 1.0 / tau);
    g.cross_entropy(logits, &vec![0; b])
}

/// Per-branch queues.
#[derive(Clone, Debug, PartialEq)]
pub struct Queues<T = f32> {
    pub queues: Vec<(Branch, NegativeQueue<T>)>,
}

impl<T: Real> Queues<T> {
    pub fn new(branches: impl IntoIterator<Item = Branch>, capacity: usize, dim: usize) -> Self {
        Queues {
            queues: branches.into_iter().map(|b| (b, NegativeQueue::new(capacity, dim))).collect(),
        }
    }

    pub fn get(&self, b: Branch) -> Result<&NegativeQueue<T>> {
        self.queues
            .iter()
            .find(|(k, _)| *k == b)
            .map(|(_, q)| q)
            .ok_or_else(|| TigrError::Contract(format!("no queue for branch {b}")))
    }

    pub fn get_mut(&mut self, b: Branch) -> Result<&mut NegativeQueue<T>> {
        self.queues
            .iter_mut()
            .find(|(k, _)| *k == b)
            .map(|(_, q)| q)
            .ok_or_else(|| TigrError::Contract(format!("no queue for branch {b}")))
    }

    pub fn cast<U: Real>(&self) -> Queues<U> {
        Queues {
            queues: self.queues.iter().map(|(b, q)| (*b, q.cast())).collect(),
        }
    }
}

/// Normalized projections per branch.
pub type Projections = [(Branch, Var)];

fn find(p: &Projections, b: Branch) -> Option<Var> {
    p.iter().find(|(k, _)| *k == b).map(|(_, v)| *v)
}

/// Intra-branch terms, one per branch present in both sets.
pub fn intra_terms<T: Real>(
    g: &mut Graph<T>,
    anchor: &Projections,
    target: &Projections,
    queues: &Queues<T>,
    tau: f64,
) -> Result<Vec<(Branch, Var)>> {
    let mut out = Vec::new();
    for &(b, q) in anchor {
        let p = find(target, b).ok_or_else(|| TigrError::Contract(format!("missing target projection for {b}")))?;
        out.push((b, info_nce(g, q, p, queues.get(b)?, tau)?));
    }
    Ok(out)
}

/// Cross-branch terms: road queries against grid positives and grid
/// negatives, spatio-temporal queries against road positives and road
/// negatives. Pairs with an inactive branch are skipped.
pub fn inter_terms<T: Real>(
    g: &mut Graph<T>,
    anchor: &Projections,
    target: &Projections,
    queues: &Queues<T>,
    tau: f64,
) -> Result<Vec<((Branch, Branch), Var)>> {
    let mut out = Vec::new();
    for (qb, pb) in [(Branch::Road, Branch::Grid), (Branch::St, Branch::Road)] {
        if let (Some(q), Some(p)) = (find(anchor, qb), find(target, pb)) {
            out.push(((qb, pb), info_nce(g, q, p, queues.get(pb)?, tau)?));
        }
    }
    Ok(out)
}

/// Mean of a non-empty list of scalars.
pub fn mean_of<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| TigrError::Contract("mean of no loss terms".into()))?;
    let mut acc = *first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

pub fn intra_loss<T: Real>(g: &mut Graph<T>, anchor: &Projections, target: &Projections, queues: &Queues<T>, tau: f64) -> Result<Var> {
    let terms: Vec<Var> = intra_terms(g, anchor, target, queues, tau)?.into_iter().map(|(_, v)| v).collect();
    mean_of(g, &terms)
}

/// `None` when no cross-branch pair is active.
pub fn inter_loss<T: Real>(
    g: &mut Graph<T>,
    anchor: &Projections,
    target: &Projections,
    queues: &Queues<T>,
    tau: f64,
) -> Result<Option<Var>> {
    let terms: Vec<Var> = inter_terms(g, anchor, target, queues, tau)?.into_iter().map(|(_, v)| v).collect();
    if terms.is_empty() {
        return Ok(None);
    }
    mean_of(g, &terms).map(Some)
}

/// `λ·intra + (1−λ)·inter`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, intra: Var, inter: Var, lambda: f64) -> Result<Var> {
    let a = g.scale(intra, lambda);
    let b = g.scale(inter, 1.0 - lambda);
    g.add(a, b)
}
