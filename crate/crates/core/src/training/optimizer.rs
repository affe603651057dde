use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

/// Per-tensor moment accumulators, laid out in `ModelParams::tensors` order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub timestep: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            timestep: 0,
            first: if kind == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            second: zeros,
        }
    }
}

/// Applies one update in place and advances the timestep.
pub fn optimizer_step(params: &mut ModelParams, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    let grad_tensors = grads.0.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.second.len() != param_tensors.len() {
        return Err(Error::Precondition(
            "gradient/optimizer layout does not match parameters".into(),
        ));
    }
    state.timestep += 1;
    let lr = state.learning_rate;
    let eps = state.epsilon;
    match state.kind {
        OptimizerKind::Adam => {
            let (b1, b2) = (state.beta1, state.beta2);
            let t = state.timestep as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (k, ((name, theta), g)) in param_tensors.iter_mut().zip(&grad_tensors).enumerate() {
                if g.name != *name || g.data.len() != theta.len() {
                    return Err(Error::Precondition(format!(
                        "gradient for '{name}' has the wrong shape"
                    )));
                }
                let m = &mut state.first[k];
                let v = &mut state.second[k];
                for i in 0..theta.len() {
                    let gi = g.data[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        OptimizerKind::Adagrad => {
            for (k, ((name, theta), g)) in param_tensors.iter_mut().zip(&grad_tensors).enumerate() {
                if g.name != *name || g.data.len() != theta.len() {
                    return Err(Error::Precondition(format!(
                        "gradient for '{name}' has the wrong shape"
                    )));
                }
                let acc = &mut state.second[k];
                for i in 0..theta.len() {
                    let gi = g.data[i];
                    acc[i] += gi * gi;
                    theta[i] -= lr * gi / (acc[i].sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
