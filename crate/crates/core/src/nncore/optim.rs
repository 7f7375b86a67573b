//! Trainable parameter storage and gradient-descent updates.

use std::sync::Arc;

use thiserror::Error;

use super::tape::{GradBuf, GradSet, NodeId, ParamId, Tape};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
}

/// Adam hyperparameters. Defaults: lr 1e-3, β1 0.9, β2 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamConfig),
}

struct Slot {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    moment1: Option<Tensor>,
    moment2: Option<Tensor>,
    lr_mult: f64,
}

/// Owns every trainable tensor of a model plus its gradient and Adam
/// moment buffers. Tapes borrow values cheaply through `Arc`.
#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            name: name.to_string(),
            value: Arc::new(value),
            grad,
            moment1: None,
            moment2: None,
            lr_mult: 1.0,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Creates the leaf node for a parameter on the given tape.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.leaf(Arc::clone(&self.slots[id.0].value), id)
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Clears Adam moments and the step counter. Call when a new training
    /// phase begins so stale moments cannot keep moving frozen parameters.
    pub fn reset_optimizer_state(&mut self) {
        self.step = 0;
        for s in &mut self.slots {
            s.moment1 = None;
            s.moment2 = None;
        }
    }

    /// Per-parameter learning-rate multiplier (discriminative rates, e.g. a
    /// faster classifier head during fine-tuning).
    pub fn set_lr_mult(&mut self, id: ParamId, mult: f64) {
        self.slots[id.0].lr_mult = mult;
    }

    /// Adds `scale ×` each gradient contribution into the dense buffers.
    /// Call in a fixed example order to keep training bitwise reproducible.
    pub fn accumulate(&mut self, grads: GradSet, scale: f64) {
        for (id, buf) in grads {
            let slot = &mut self.slots[id.0];
            match buf {
                GradBuf::Dense(t) => slot.grad.axpy(scale, &t),
                GradBuf::Rows { shape, rows, data } => {
                    let cols = shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = slot.grad.row_mut(r);
                        for (o, &v) in dst.iter_mut().zip(&data[i * cols..(i + 1) * cols]) {
                            *o += scale * v;
                        }
                    }
                }
            }
        }
    }

    /// Overwrites a parameter value (checkpoint restore, snapshots).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.slots[id.0].value.shape(),
            "set_value shape mismatch for '{}'",
            self.slots[id.0].name
        );
        self.slots[id.0].value = Arc::new(value);
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| (*s.value).clone()).collect()
    }

    /// (name, value) pairs in registration order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), (*s.value).clone()))
            .collect()
    }

    /// Overwrites the parameter registered under `name`; false if absent.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> bool {
        for (i, s) in self.slots.iter().enumerate() {
            if s.name == name {
                self.set_value(ParamId(i), value);
                return true;
            }
        }
        false
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.slots.len(), "snapshot size mismatch");
        for (slot, t) in self.slots.iter_mut().zip(snapshot) {
            slot.value = Arc::new(t.clone());
        }
    }

    /// Applies one update with the given optimizer, consuming the current
    /// gradients. Adam uses bias-corrected moment estimates.
    pub fn step(&mut self, opt: &Optimizer) -> Result<(), OptimError> {
        for s in &self.slots {
            if !s.grad.is_finite() {
                return Err(OptimError::NonFiniteGradient(s.name.clone()));
            }
        }
        match *opt {
            Optimizer::Sgd { lr } => {
                for s in &mut self.slots {
                    let value = Arc::make_mut(&mut s.value);
                    value.axpy(-lr * s.lr_mult, &s.grad);
                }
            }
            Optimizer::Adam(cfg) => {
                self.step += 1;
                let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
                for s in &mut self.slots {
                    let m = s
                        .moment1
                        .get_or_insert_with(|| Tensor::zeros(s.grad.shape()));
                    let v = s
                        .moment2
                        .get_or_insert_with(|| Tensor::zeros(s.grad.shape()));
                    let lr = cfg.lr * s.lr_mult;
                    let value = Arc::make_mut(&mut s.value);
                    for ((w, g), (mi, vi)) in value
                        .data_mut()
                        .iter_mut()
                        .zip(s.grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
