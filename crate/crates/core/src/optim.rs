//! Adam and learning-rate schedules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns the new parameter leaf.
pub fn adam_step(name: &str, param: &Tensor, grad: &[f64], state: &mut AdamState, lr: f64) -> Result<Tensor> {
    let n = param.numel();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("adam_step", param.shape(), &[grad.len()]));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "non-finite gradient {} at index {i} of parameter {name}",
            grad[i]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut data = param.data().to_vec();
    for i in 0..n {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Tensor::param(data, param.shape())
}

/// Adam over a set of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter that carries a gradient and clears it.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, lr: f64) -> Result<usize> {
        let mut updates = Vec::new();
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NumericDomain(format!(
                        "non-finite gradient {} at index {i} of parameter {name}",
                        g[i]
                    )));
                }
                updates.push((name.clone(), g));
            }
        }
        let mut grads: BTreeMap<String, Vec<f64>> = updates.into_iter().collect();
        let mut count = 0;
        for (name, p) in params {
            let Some(g) = grads.remove(&name) else { continue };
            let state = self.states.entry(name.clone()).or_insert_with(|| AdamState::new(p.numel()));
            *p = adam_step(&name, p, &g, state, lr)?;
            count += 1;
        }
        Ok(count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// `initial · (1 − ratio)^epoch`
    Exponential { initial: f64, ratio: f64 },
    /// `initial · factor^(milestones passed)`
    StepMultiply {
        initial: f64,
        factor: f64,
        milestones: Vec<usize>,
    },
    /// `initial · 0.5^⌊epoch / period⌋`
    HalveEvery { initial: f64, period: usize },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Exponential { initial: lr, ratio: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Exponential { initial, ratio } => *initial > 0.0 && (0.0..1.0).contains(ratio),
            LrSchedule::StepMultiply { initial, factor, .. } => *initial > 0.0 && *factor > 0.0 && *factor <= 1.0,
            LrSchedule::HalveEvery { initial, period } => *initial > 0.0 && *period > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Exponential { initial, ratio } => initial * (1.0 - ratio).powi(epoch as i32),
            LrSchedule::StepMultiply {
                initial,
                factor,
                milestones,
            } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                initial * factor.powi(passed as i32)
            }
            LrSchedule::HalveEvery { initial, period } => initial * 0.5f64.powi((epoch / period) as i32),
        }
    }
}
