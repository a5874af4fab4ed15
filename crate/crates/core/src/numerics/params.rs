use std::collections::HashMap;

use super::{Real, Rng, Tensor};
use crate::error::{Result, TigrError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Read access to parameter values by id, used by the autodiff tape.
pub trait ParamSource<T: Real> {
    fn param(&self, id: ParamId) -> &Tensor<T>;
}

/// All trainable parameters of a model, addressed by unique path names
/// such as `road.encoder.layer0.wq`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TigrError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Adds a parameter drawn from `N(0, std²)`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(std * rng.normal())).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Adds a `fan_in × fan_out` weight with Xavier-uniform initialisation.
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::from_f64(rng.range(-a, a))).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a backward pass's gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &GradBuffer<T>) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Copy of the store in another float width, gradients zeroed.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Real> ParamSource<T> for ParamStore<T> {
    fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }
}

/// Gradients produced by one backward pass, indexed by parameter id.
#[derive(Clone, Debug)]
pub struct GradBuffer<T = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new(len: usize) -> Self {
        GradBuffer { slots: vec![None; len] }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<T>) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// EMA shadow values for a subset of a [`ParamStore`].
///
/// Holds values only; there is no gradient slot, so nothing can train a
/// shadow except [`ShadowStore::ema_update`].
#[derive(Clone, Debug)]
pub struct ShadowStore<T = f32> {
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ShadowStore<T> {
    /// Shadows the given anchor parameters, starting as exact copies.
    pub fn mirror(anchor: &ParamStore<T>, ids: impl IntoIterator<Item = ParamId>) -> Self {
        let mut values = vec![None; anchor.len()];
        for id in ids {
            values[id.0] = Some(anchor.get(id).value.clone());
        }
        ShadowStore { values }
    }

    pub fn empty(len: usize) -> Self {
        ShadowStore { values: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        if id.0 >= self.values.len() {
            self.values.resize(id.0 + 1, None);
        }
        self.values[id.0] = Some(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
    }

    /// `shadow ← μ·shadow + (1−μ)·anchor` for every shadowed tensor.
    pub fn ema_update(&mut self, anchor: &ParamStore<T>, mu: f64) {
        // μ = 1 and μ = 0 are exact copies, not floating-point blends.
        for (i, slot) in self.values.iter_mut().enumerate() {
            let Some(t) = slot else { continue };
            let a = &anchor.get(ParamId(i)).value;
            if mu == 1.0 {
                continue;
            }
            if mu == 0.0 {
                t.data_mut().copy_from_slice(a.data());
                continue;
            }
            for (s, &x) in t.data_mut().iter_mut().zip(a.data()) {
                *s = T::from_f64(mu * s.as_f64() + (1.0 - mu) * x.as_f64());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ShadowStore<U> {
        ShadowStore {
            values: self.values.iter().map(|v| v.as_ref().map(Tensor::cast)).collect(),
        }
    }
}

/// Parameter view used by the target path: shadowed ids resolve to the EMA
/// copy, everything else to the anchor value.
pub struct TargetView<'a, T: Real> {
    pub anchor: &'a ParamStore<T>,
    pub shadow: &'a ShadowStore<T>,
}

impl<T: Real> ParamSource<T> for TargetView<'_, T> {
    fn param(&self, id: ParamId) -> &Tensor<T> {
        self.shadow.get(id).unwrap_or_else(|| self.anchor.param(id))
    }
}
