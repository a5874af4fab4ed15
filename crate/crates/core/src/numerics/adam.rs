use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Result, TigrError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments live here, one pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// One update over `ids` (all parameters when `None`), then zeroes
    /// every gradient slot.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: Option<&[ParamId]>) -> Result<()> {
        let all: Vec<ParamId>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = store.ids().collect();
                &all
            }
        };
        for &id in ids {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(TigrError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, g), mk), vk) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m1 = self.beta1 * mk.as_f64() + (1.0 - self.beta1) * g;
                let v1 = self.beta2 * vk.as_f64() + (1.0 - self.beta2) * g * g;
                *mk = T::from_f64(m1);
                *vk = T::from_f64(v1);
                let update = self.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + self.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
