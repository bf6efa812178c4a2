use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with an additive gradient slot of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        self.params[id.0].value_arc()
    }

    /// Mutable access to a value; copies on write if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Schema(format!(
                "parameter `{}` expects shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm over every gradient slot.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Rounds every value through `f32`, emulating 32-bit parameter storage.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in Arc::make_mut(&mut p.value).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Hash of the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

pub fn zero_grads(store: &mut ParamStore) {
    store.zero_grads();
}

/// One bias-corrected Adam update over every trainable parameter.
///
/// Weight decay is the L2 form: `weight_decay * value` is added to the gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let value = Arc::make_mut(&mut p.value);
        for (j, (w, g)) in value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g + cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_clears_everything() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.grad_mut(id).fill(3.0);
        zero_grads(&mut s);
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(1.0)).unwrap();
        s.grad_mut(id).fill(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &mut st, &cfg);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert!((s.value(id).item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_without_decay_ignores_value() {
        let run = |start: f64| {
            let mut s = ParamStore::new();
            let id = s.add("w", Tensor::scalar(start)).unwrap();
            let mut st = AdamState::new(&s);
            for g in [0.5, -0.2, 0.1] {
                s.grad_mut(id).fill(g);
                adam_step(&mut s, &mut st, &AdamConfig::default());
            }
            s.value(id).item() - start
        };
        assert!((run(1.0) - run(-40.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(2.0)).unwrap();
        s.set_trainable(id, false);
        s.grad_mut(id).fill(1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default());
        assert_eq!(s.value(id).item(), 2.0);
    }
}
