//! Plain SGD with a stepped decay schedule, plus the named-parameter store
//! shared by every trainable model.

use std::collections::HashMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Learning rate starts at `initial_lr` and multiplies by `decay_factor`
/// every `decay_every` epochs:
/// lr(epoch) = initial_lr * decay_factor^floor(epoch / decay_every).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial_lr: 0.001, decay_factor: 0.01, decay_every: 25 }
    }
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, decay_every: usize) -> Result<Self> {
        let s = LrSchedule { initial_lr, decay_factor, decay_every };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(lr, 1.0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 {
            return Err(Error::contract("initial_lr must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::contract("decay_factor must be in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::contract("decay_every must be >= 1"));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Ordered map of named parameter tensors. Order is insertion order, so
/// checkpoints and gradient application are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrite values of an existing parameter (shape must match).
    pub fn assign(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if t.numel() != data.len() {
            return Err(Error::contract(format!(
                "parameter {name} has {} elements, checkpoint provides {}",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<String, Vec<f64>>,
    pub count: usize,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        match self.grads.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    /// Divide all accumulated gradients by `n` (batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One SGD step: p <- p - lr(epoch) * g for every trainable parameter.
/// A trainable parameter without a gradient is a contract error; frozen
/// parameters are skipped.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &GradStore,
    schedule: &LrSchedule,
    epoch: usize,
) -> Result<()> {
    let lr = schedule.lr(epoch);
    for (name, tensor) in params.iter_mut() {
        if !tensor.requires_grad {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter {name}")))?;
        for (p, gi) in tensor.data_mut().iter_mut().zip(g) {
            *p -= lr * gi;
        }
    }
    Ok(())
}
