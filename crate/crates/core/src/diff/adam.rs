//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update using the accumulated gradients of `params`.
    ///
    /// `g' = g + wd * w`, `m = b1 m + (1-b1) g'`, `v = b2 v + (1-b2) g'^2`,
    /// `w -= lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if !params.has_grad() {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Shape(format!("optimizer moments for `{name}`")));
            }
            let w = p.value.data_mut();
            let g = p.grad.data();
            for (((wi, &gi), mi), vi) in w
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + c.weight_decay * *wi;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("adam update of `{name}`")));
            }
        }
        Ok(())
    }

    /// Moments and step counter as checkpoint entries.
    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}step"),
            Tensor::scalar(self.step as f64),
        )];
        for (k, t) in &self.first {
            out.push((format!("{prefix}m.{k}"), t.clone()));
        }
        for (k, t) in &self.second {
            out.push((format!("{prefix}v.{k}"), t.clone()));
        }
        out
    }

    pub fn from_entries(config: AdamConfig, entries: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let mut state = Self::new(config);
        let mut found_step = false;
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix(prefix) else { continue };
            if rest == "step" {
                state.step = t.item()? as u64;
                found_step = true;
            } else if let Some(k) = rest.strip_prefix("m.") {
                state.first.insert(k.to_string(), t.clone());
            } else if let Some(k) = rest.strip_prefix("v.") {
                state.second.insert(k.to_string(), t.clone());
            }
        }
        if !found_step {
            return Err(Error::Checkpoint(format!("no optimizer state under `{prefix}`")));
        }
        Ok(state)
    }
}
