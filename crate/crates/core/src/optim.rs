//! SGD with momentum and weight decay, with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learning rates per parameter group: the BatchFormer group runs at
/// `base * bf_mult`, everything else at `base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLr {
    pub base: f64,
    pub bf_mult: f64,
}

impl GroupLr {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::BatchFormer => self.base * self.bf_mult,
            ParamGroup::Backbone | ParamGroup::Classifier => self.base,
        }
    }
}

/// Momentum buffers, one per parameter, created lazily at zero.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }
}

/// `v ← momentum·v + g + wd·p`, `p ← p − lr·v` for every id in `trainable`.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    trainable: &[ParamId],
    lr: GroupLr,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    for &id in trainable {
        let grad = grads
            .get(id.index())
            .and_then(Option::as_ref)
            .ok_or_else(|| LabError::contract(format!("no gradient for {}", store.get(id).name)))?;
        let step = lr.lr(store.get(id).group);
        let param = store.value_mut(id);
        if grad.shape() != param.shape() {
            return Err(LabError::dim("sgd_step", param.shape(), grad.shape()));
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape()));
        for ((vi, &gi), pi) in v
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(param.data_mut())
        {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= step * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch.
    Step {
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Half-cosine decay from the base rate towards zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate multiplier for `epoch` (0-based) out of `total`.
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                gamma.powi(passed as i32)
            }
            LrSchedule::Cosine => {
                if total == 0 {
                    return 1.0;
                }
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
            }
        }
    }
}
