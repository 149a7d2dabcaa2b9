//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{CssError, Result};
use crate::params::{ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    /// One in-place update of `param` with gradient `grad`.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.first_moment.len() {
            return Err(CssError::contract(format!(
                "adam shape mismatch: param {}, grad {}, state {}",
                param.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(CssError::contract(format!("learning rate must be positive, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            param[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam state per parameter of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            states: store.iter().map(|(_, p)| AdamState::new(p.value.numel())).collect(),
        }
    }

    /// Updates every parameter; parameters absent from `grads` see a zero
    /// gradient so every state advances in lockstep. `lr_of` maps a
    /// parameter to its learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr_of: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(CssError::contract("optimizer does not match parameter store"));
        }
        let mut zeros = Vec::new();
        for (i, state) in self.states.iter_mut().enumerate() {
            let id = ParamId(i);
            let param = store.value_mut(id);
            let grad = match grads.get(id) {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(CssError::contract(format!(
                            "gradient shape {:?} for parameter shape {:?}",
                            g.shape(),
                            param.shape()
                        )));
                    }
                    g.data()
                }
                None => {
                    zeros.clear();
                    zeros.resize(param.numel(), 0.0);
                    &zeros
                }
            };
            state.step(param.data_mut(), grad, lr_of(id))?;
        }
        Ok(())
    }
}
