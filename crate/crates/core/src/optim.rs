//! Adam with bias-corrected moments.
//!
//! Updates are sparse in the parameter names: a parameter absent from the
//! gradient set is left alone and its moments do not decay. Each parameter
//! keeps its own step count so bias correction stays exact when only part
//! of a model is touched in a step (as happens when edges are visited in
//! turn).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    param_steps: BTreeMap<String, u64>,
    step: u64,
}

impl OptState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: ParamSet::new(),
            v: ParamSet::new(),
            param_steps: BTreeMap::new(),
            step: 0,
        }
    }

    /// Number of completed update calls.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// Apply one update to `params` in place.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(m) = self.m.get(name) {
                if m.shape() != p.shape() {
                    return Err(Error::contract(format!(
                        "moment for `{name}` has shape {:?}, parameter has {:?}",
                        m.shape(),
                        p.shape()
                    )));
                }
            }
        }

        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in grads.iter() {
            let t = self.param_steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let t = *t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);

            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted above").data_mut();
            let v = self.v.get_mut(name).expect("inserted above").data_mut();
            let p = params.get_mut(name).expect("checked above").data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Functional form of [`OptState::update`].
pub fn adam_step(state: &OptState, params: &ParamSet, grads: &ParamSet) -> Result<(ParamSet, OptState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.update(&mut params, grads)?;
    Ok((params, state))
}
