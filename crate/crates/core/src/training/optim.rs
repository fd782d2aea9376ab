//! First-order optimizers over named parameter tensors.
//!
//! Each step validates every gradient before touching any parameter, so a
//! non-finite gradient leaves both parameters and state unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelParams;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adadelta { lr: f64, rho: f64, eps: f64 },
    Rmsprop { lr: f64, rho: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self::Sgd { lr: 0.1 }
    }

    pub fn adadelta() -> Self {
        Self::Adadelta {
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
        }
    }

    pub fn rmsprop() -> Self {
        Self::Rmsprop {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
        }
    }

    pub fn adam() -> Self {
        Self::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Default hyperparameters for an optimizer name
    /// (`sgd`, `adadelta`, `rmsprop`, `adam`).
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sgd" => Some(Self::sgd()),
            "adadelta" => Some(Self::adadelta()),
            "rmsprop" => Some(Self::rmsprop()),
            "adam" => Some(Self::adam()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adadelta { .. } => "adadelta",
            Self::Rmsprop { .. } => "rmsprop",
            Self::Adam { .. } => "adam",
        }
    }

    pub fn step(
        &self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        state: &mut OptimizerState,
    ) -> Result<(), TrainError> {
        match *self {
            Self::Sgd { lr } => sgd_step(params, grads, state, lr),
            Self::Adadelta { lr, rho, eps } => adadelta_step(params, grads, state, lr, rho, eps),
            Self::Rmsprop { lr, rho, eps } => rmsprop_step(params, grads, state, lr, rho, eps),
            Self::Adam { lr, beta1, beta2, eps } => adam_step(params, grads, state, lr, (beta1, beta2), eps),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

/// Per-parameter accumulators plus the update counter.
///
/// Slot meaning by optimizer: Adam `[m, v]`, RmsProp `[E[g^2]]`,
/// Adadelta `[E[g^2], E[dx^2]]`, SGD none.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: BTreeMap<String, Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn slots_for(&mut self, name: &str, like: &Tensor, n: usize) -> &mut Vec<Tensor> {
        let slots = self.slots.entry(name.to_string()).or_default();
        while slots.len() < n {
            slots.push(Tensor::zeros(like.shape()));
        }
        slots
    }
}

fn validate(params: &ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::UnknownGradient(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::UnknownGradient(format!("{name} (shape {:?})", g.shape())));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    Ok(())
}

/// Applies `f(theta, g, slots)` elementwise for every parameter with a
/// gradient.
fn apply(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    n_slots: usize,
    mut f: impl FnMut(&mut f64, f64, &mut [f64]),
) -> Result<(), TrainError> {
    validate(params, grads)?;
    state.step += 1;
    let mut scratch = vec![0.0; n_slots];
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated");
        let slots = state.slots_for(name, g, n_slots);
        for (i, (theta, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            for (k, s) in slots.iter().enumerate() {
                scratch[k] = s.data()[i];
            }
            f(theta, gi, &mut scratch);
            for (k, s) in slots.iter_mut().enumerate() {
                s.data_mut()[i] = scratch[k];
            }
        }
    }
    Ok(())
}

/// `theta -= lr * g`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    apply(params, grads, state, 0, |theta, g, _| *theta -= lr * g)
}

/// Adadelta:
/// `E[g^2] = rho E[g^2] + (1-rho) g^2`,
/// `dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g`,
/// `E[dx^2] = rho E[dx^2] + (1-rho) dx^2`, `theta += lr * dx`.
pub fn adadelta_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<(), TrainError> {
    apply(params, grads, state, 2, |theta, g, s| {
        s[0] = rho * s[0] + (1.0 - rho) * g * g;
        let dx = -((s[1] + eps).sqrt() / (s[0] + eps).sqrt()) * g;
        s[1] = rho * s[1] + (1.0 - rho) * dx * dx;
        *theta += lr * dx;
    })
}

/// RmsProp: `E[g^2] = rho E[g^2] + (1-rho) g^2`,
/// `theta -= lr * g / sqrt(E[g^2] + eps)`.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<(), TrainError> {
    apply(params, grads, state, 1, |theta, g, s| {
        s[0] = rho * s[0] + (1.0 - rho) * g * g;
        *theta -= lr * g / (s[0] + eps).sqrt();
    })
}

/// Adam with bias correction: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    let t = state.step as i32 + 1;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    apply(params, grads, state, 2, |theta, g, s| {
        s[0] = beta1 * s[0] + (1.0 - beta1) * g;
        s[1] = beta2 * s[1] + (1.0 - beta2) * g * g;
        let m_hat = s[0] / c1;
        let v_hat = s[1] / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    })
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() && max_norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
