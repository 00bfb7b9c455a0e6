//! SGD with momentum and Adam, both with L2 weight decay folded into the gradient.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd(Sgd),
    Adam(Adam),
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerKind::Sgd(s) => s.lr,
            OptimizerKind::Adam(a) => a.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            OptimizerKind::Sgd(s) => s.lr = lr,
            OptimizerKind::Adam(a) => a.lr = lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    /// Per-parameter step count (Adam bias correction).
    steps: u64,
}

/// Optimizer plus its per-parameter state, keyed by [`ParamId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, moments: Vec::new(), step: 0 }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd(Sgd { lr, momentum, weight_decay }))
    }

    pub fn adam(adam: Adam) -> Self {
        Self::new(OptimizerKind::Adam(adam))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Whether any state has been allocated for `id`.
    pub fn has_state(&self, id: ParamId) -> bool {
        matches!(self.moments.get(id.0), Some(Some(_)))
    }

    /// Update every parameter in `ids` from its gradient, then clear those gradients.
    /// Parameters outside `ids` are left untouched, including their moment buffers.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if store.grad(id).is_none() {
                return Err(Error::MissingGrad(id.0));
            }
        }
        self.step += 1;
        for &id in ids {
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let param = store.get_mut(id);
            let grad = param.grad.take().expect("checked above");
            let n = param.value.numel();
            let state = self.moments[id.0].get_or_insert_with(|| Moments {
                first: alloc::vec![0.0; n],
                second: match self.kind {
                    OptimizerKind::Adam(_) => alloc::vec![0.0; n],
                    OptimizerKind::Sgd(_) => Vec::new(),
                },
                steps: 0,
            });
            state.steps += 1;
            let values = param.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd(Sgd { lr, momentum, weight_decay }) => {
                    let first_step = state.steps == 1;
                    for ((p, g), m) in values.iter_mut().zip(grad.data()).zip(state.first.iter_mut()) {
                        let d = g + weight_decay * *p;
                        *m = if first_step { d } else { momentum * *m + d };
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam(Adam { lr, beta1, beta2, eps, weight_decay }) => {
                    let t = state.steps as i32;
                    let bc1 = 1.0 - libm::pow(beta1, t as f64);
                    let bc2 = 1.0 - libm::pow(beta2, t as f64);
                    for (((p, g), m), v) in values
                        .iter_mut()
                        .zip(grad.data())
                        .zip(state.first.iter_mut())
                        .zip(state.second.iter_mut())
                    {
                        let d = g + weight_decay * *p;
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (math::sqrt(vhat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
