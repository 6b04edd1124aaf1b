//! Named parameter storage, decoupled-weight-decay Adam, and the learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One registered parameter with its gradient buffer and moment estimates.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

/// Named parameters, unique by name, with shapes fixed at registration.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Handles in registration order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a value in place, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Overwrites moment buffers (used when restoring a checkpoint).
    pub fn set_moments(&mut self, id: ParamId, first: Tensor, second: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if first.shape() != p.value.shape() || second.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_moments",
                lhs: p.value.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        p.first_moment = first;
        p.second_moment = second;
        Ok(())
    }

    /// Records every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| graph.param(p.value.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| graph.constant(p.value.clone())).collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients flowing into the bound leaves to the gradient buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                for (acc, x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Hyperparameters of the decoupled-weight-decay adaptive-moment update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Applies one update with learning rate `lr` and returns the pre-clip
/// global gradient norm.
///
/// The global norm is clipped first, then the moments are updated, then the
/// parameter is decayed directly and moved by the bias-corrected step.
pub fn optimizer_step(store: &mut ParamStore, cfg: &AdamWConfig, lr: f64) -> Result<f64> {
    for p in &store.params {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
    }
    let norm = store.grad_norm();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let n = p.value.len();
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..n {
            let g = grad[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * cfg.weight_decay * value[i];
            value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay reaching 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return if step >= total_steps && total_steps > 0 { 0.0 } else { base_lr };
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
