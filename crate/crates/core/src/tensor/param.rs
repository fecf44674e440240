use std::sync::atomic::{AtomicU64, Ordering};

use super::{Gradients, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, used to route tape gradients back
/// to the store that owns the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        Self(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    key: ParamKey,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            key: ParamKey::fresh(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            steps: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Direct mutable access to the value; optimizer state is left as is.
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replaces the value, resetting gradient and optimizer state. The shape
    /// must match.
    pub fn set_value(&mut self, value: Tensor) -> crate::Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        self.zero_grad();
        self.m = Tensor::zeros(self.value.shape());
        self.v = Tensor::zeros(self.value.shape());
        self.steps = 0;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered collection of named parameters owned by one model component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds the gradients a tape computed for this store's parameters.
    /// Parameters absent from the tape receive nothing.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            if let Some(g) = grads.param(p.key) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    for p in &mut store.params {
        p.steps += 1;
        let t = p.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = p.v.data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for ((w, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *w -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
    }
}

pub fn sgd_step(store: &mut ParamStore, lr: f64) {
    for p in &mut store.params {
        let g = p.grad.data();
        for (w, &g) in p.value.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
}
