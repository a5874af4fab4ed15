use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Real, Rng};
use crate::error::{Result, TigrError};

/// Tensors up to this size are checked entry by entry.
pub const FULL_CHECK_LIMIT: usize = 256;
/// Entries sampled from larger tensors.
pub const SAMPLED_ENTRIES: usize = 32;

/// Compares the gradients stored in `store` against central differences of
/// `loss_fn`, returning the worst relative error per parameter name.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`. The caller must have
/// populated the gradient slots with a backward pass of the same loss.
pub fn gradient_check<T: Real>(
    store: &mut ParamStore<T>,
    ids: Option<&[ParamId]>,
    h: f64,
    rng: &mut Rng,
    mut loss_fn: impl FnMut(&ParamStore<T>) -> Result<f64>,
) -> Result<BTreeMap<String, f64>> {
    if !(1e-4..=1e-2).contains(&h) {
        return Err(TigrError::config("h", format!("{h} outside [1e-4, 1e-2]")));
    }
    let base = loss_fn(store)?;
    let again = loss_fn(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(TigrError::GradCheck(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = BTreeMap::new();
    for id in ids {
        let numel = store.get(id).value.numel();
        let entries: Vec<usize> = if numel <= FULL_CHECK_LIMIT {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            all.truncate(SAMPLED_ENTRIES);
            all.sort_unstable();
            all
        };
        let mut worst = 0.0f64;
        for k in entries {
            let analytic = store.get(id).grad.data()[k].as_f64();
            let x = store.get(id).value.data()[k];
            let xp = x + T::from_f64(h);
            let xm = x - T::from_f64(h);
            store.get_mut(id).value.data_mut()[k] = xp;
            let fp = loss_fn(store);
            store.get_mut(id).value.data_mut()[k] = xm;
            let fm = loss_fn(store);
            store.get_mut(id).value.data_mut()[k] = x;
            let numeric = (fp? - fm?) / (xp.as_f64() - xm.as_f64());
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        report.insert(store.get(id).name.clone(), worst);
    }
    Ok(report)
}
