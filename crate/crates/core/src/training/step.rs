use super::loss::{inter_terms, intra_terms, mean_of, total_loss, Queues};
use super::{LossReport, TrainConfig};
use crate::data::TrajectoryRecord;
use crate::encoder::{Branch, BranchBatch, TigrModel};
use crate::error::{Result, TigrError};
use crate::masking::{apply_view, MaskingConfig, ViewConfig};
use crate::numerics::{Adam, Graph, Real, Rng, Tensor, Var};
use crate::spatiotemporal::TrafficFeatures;

/// Rows of the stacked full-length token matrix kept by one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRows {
    pub rows: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl ViewRows {
    fn build(batch: &BranchBatch, cfg: &ViewConfig, rng: &mut Rng) -> Self {
        let mut rows = Vec::with_capacity(batch.ids.len());
        let mut lengths = Vec::with_capacity(batch.len());
        for (&len, off) in batch.lengths.iter().zip(batch.offsets()) {
            let kept = apply_view(len, cfg, rng);
            lengths.push(kept.len());
            rows.extend(kept.into_iter().map(|i| off + i));
        }
        ViewRows { rows, lengths }
    }
}

/// Token batches and both masked views for every active branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub branches: Vec<(Branch, BranchBatch, ViewRows, ViewRows)>,
}

/// Builds the branch batches and draws the two views. Each (branch, view)
/// pair uses its own stream derived from `rng`.
pub fn prepare_step<T: Real>(model: &TigrModel<T>, batch: &[&TrajectoryRecord], masking: &MaskingConfig, rng: &Rng) -> StepInputs {
    let mut out = Vec::new();
    for (k, bm) in model.branches.iter().enumerate() {
        let mut b = BranchBatch::default();
        for r in batch {
            match bm.branch {
                Branch::Grid => {
                    let times: Vec<_> = r.grid.tokens.iter().map(|t| t.t).collect();
                    b.push(&r.grid.cells(), &times);
                }
                Branch::Road | Branch::St => b.push(&r.road.segments(), &r.road.times()),
            }
        }
        let v1 = ViewRows::build(&b, &masking.view1, &mut rng.derive(2 * k as u64));
        let v2 = ViewRows::build(&b, &masking.view2, &mut rng.derive(2 * k as u64 + 1));
        out.push((bm.branch, b, v1, v2));
    }
    StepInputs { branches: out }
}

/// Unit-length projections of one view for every branch.
pub fn project_view<T: Real>(
    g: &mut Graph<T>,
    model: &TigrModel<T>,
    inputs: &StepInputs,
    second: bool,
    feats: Option<&TrafficFeatures>,
    mut dropout: Option<&mut Rng>,
) -> Result<Vec<(Branch, Var)>> {
    let mut out = Vec::new();
    for (bm, (b, batch, v1, v2)) in model.branches.iter().zip(&inputs.branches) {
        debug_assert_eq!(bm.branch, *b);
        let view = if second { v2 } else { v1 };
        let tokens = model.tokens(g, bm, batch, feats)?;
        let kept = g.gather(tokens, &view.rows)?;
        let z = model.encode(g, bm, kept, &view.lengths, dropout.as_deref_mut())?;
        let p = bm.head.forward(g, z)?;
        out.push((*b, g.l2_normalize(p)));
    }
    Ok(out)
}

/// Scalar vars of one step's objective.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub intra: Var,
    pub inter: Option<Var>,
    pub per_branch: Vec<(Branch, Var)>,
}

impl LossParts {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let val = |v: Var| g.value(v).item().as_f64();
        LossReport {
            intra: val(self.intra),
            inter: self.inter.map(val).unwrap_or(0.0),
            total: val(self.total),
            per_branch: self.per_branch.iter().map(|&(b, v)| (b.code().to_string(), val(v))).collect(),
        }
    }
}

/// Anchor-side objective for fixed target projections. The targets enter
/// as constants, so no gradient reaches the target path. Without an active
/// cross-branch pair, or with `no_inter`, the total is the intra loss.
pub fn step_loss<T: Real>(
    g: &mut Graph<T>,
    model: &TigrModel<T>,
    inputs: &StepInputs,
    targets: &[(Branch, Tensor<T>)],
    queues: &Queues<T>,
    cfg: &TrainConfig,
    feats: Option<&TrafficFeatures>,
    dropout: Option<&mut Rng>,
) -> Result<LossParts> {
    let anchor = project_view(g, model, inputs, false, feats, dropout)?;
    let target: Vec<(Branch, Var)> = targets.iter().map(|(b, t)| (*b, g.constant(t.clone()))).collect();
    let per_branch = intra_terms(g, &anchor, &target, queues, cfg.tau)?;
    let intra = mean_of(g, &per_branch.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let inter = if model.spec.ablation.no_inter {
        None
    } else {
        let terms: Vec<Var> = inter_terms(g, &anchor, &target, queues, cfg.tau)?.into_iter().map(|(_, v)| v).collect();
        if terms.is_empty() {
            None
        } else {
            Some(mean_of(g, &terms)?)
        }
    };
    let total = match inter {
        Some(inter) => total_loss(g, intra, inter, cfg.lambda)?,
        None => intra,
    };
    Ok(LossParts {
        total,
        intra,
        inter,
        per_branch,
    })
}

/// Target projections of View 2 through the EMA encoders and heads.
pub fn target_projections<T: Real>(
    model: &TigrModel<T>,
    inputs: &StepInputs,
    feats: Option<&TrafficFeatures>,
) -> Result<Vec<(Branch, Tensor<T>)>> {
    let view = model.target_view();
    let mut g = Graph::frozen(&view);
    let p = project_view(&mut g, model, inputs, true, feats, None)?;
    Ok(p.into_iter().map(|(b, v)| (b, g.value(v).clone())).collect())
}

/// One optimisation step: views, target projections, anchor loss,
/// backward, Adam on all anchor parameters, EMA, then enqueue.
pub fn train_step(
    model: &mut TigrModel<f32>,
    adam: &mut Adam<f32>,
    queues: &mut Queues<f32>,
    batch: &[&TrajectoryRecord],
    cfg: &TrainConfig,
    masking: &MaskingConfig,
    feats: Option<&TrafficFeatures>,
    rng: &Rng,
) -> Result<LossReport> {
    if batch.len() < 2 {
        return Err(TigrError::Contract(format!("batch of {} trajectories; need at least 2", batch.len())));
    }
    let inputs = prepare_step(model, batch, masking, &rng.derive(1));
    let targets = target_projections(model, &inputs, feats)?;
    let (report, grads) = {
        let mut g = Graph::new(&model.store);
        let mut drop_rng = rng.derive(2);
        let parts = step_loss(&mut g, model, &inputs, &targets, queues, cfg, feats, Some(&mut drop_rng))?;
        let report = parts.report(&g);
        if ![report.total, report.intra, report.inter].iter().all(|v| v.is_finite()) {
            return Err(TigrError::NonFinite(format!(
                "loss at optimizer step {}: intra {} inter {} total {}",
                adam.step + 1,
                report.intra,
                report.inter,
                report.total
            )));
        }
        (report, g.backward(parts.total)?.params)
    };
    model.store.accumulate(&grads);
    adam.step(&mut model.store, None)?;
    model.ema_update();
    for (b, t) in &targets {
        queues.get_mut(*b)?.enqueue(t)?;
    }
    Ok(report)
}
