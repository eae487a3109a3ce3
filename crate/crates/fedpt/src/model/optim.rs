use crate::error::{Error, Result};

/// Cosine learning-rate decay over `total` rounds: full rate at round 0,
/// zero at the final round, `base_lr` throughout a single-round schedule.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::input("schedule needs at least one round"));
    }
    if t >= total {
        return Err(Error::input(format!("round {t} outside schedule of {total} rounds")));
    }
    if total == 1 {
        return Ok(base_lr);
    }
    let frac = t as f64 / (total - 1) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Plain gradient step, p ← p − lr·g, with no momentum or decay.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-training-loop optimizer state over a flat parameter vector.
/// Adam uses the standard bias-corrected moments plus decoupled weight
/// decay; SGD ignores the decay.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { state: AdamState, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dim: usize, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                state: AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 },
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradient entries",
                params.len(),
                grads.len()
            )));
        }
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam { state, beta1, beta2, eps, weight_decay } => {
                if state.m.len() != params.len() {
                    return Err(Error::contract(format!(
                        "optimizer sized for {} parameters, got {}",
                        state.m.len(),
                        params.len()
                    )));
                }
                state.t += 1;
                let bc1 = 1.0 - beta1.powi(state.t as i32);
                let bc2 = 1.0 - beta2.powi(state.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    state.m[i] = *beta1 * state.m[i] + (1.0 - *beta1) * g;
                    state.v[i] = *beta2 * state.v[i] + (1.0 - *beta2) * g * g;
                    let mhat = state.m[i] / bc1;
                    let vhat = state.v[i] / bc2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + *eps) + *weight_decay * params[i]);
                }
                Ok(())
            }
        }
    }
}
