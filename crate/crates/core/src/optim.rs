//! Adam and the multi-step learning-rate schedule.

use cmlp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{GradStore, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Every parameter must have a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(cmlp_tensor::TensorError::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ))
        .into());
    }
    let missing = params.ids().find(|&id| grads.get(id).is_none());
    if let Some(id) = missing {
        return Err(cmlp_tensor::TensorError::Contract(format!(
            "missing gradient for {}",
            params.name(id)
        ))
        .into());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.iter())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = g.expect("checked above");
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Piecewise-constant decay: `base · gamma^(milestones passed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return config_err("learning rate must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config_err("gamma must lie in (0, 1]");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("milestones must be strictly increasing");
        }
        Ok(())
    }

    /// Default milestones at 60% and 85% of the run.
    pub fn default_milestones(epochs: usize) -> Vec<usize> {
        let mut m: Vec<usize> = [0.6, 0.85]
            .iter()
            .map(|f| ((epochs as f64) * f).round() as usize)
            .filter(|&e| e > 0)
            .collect();
        m.dedup();
        m
    }
}

pub fn schedule_lr(epoch: usize, schedule: &MultiStepLr) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| epoch >= m).count();
    schedule.base * schedule.gamma.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = MultiStepLr {
            base: 1e-5,
            milestones: vec![100, 200],
            gamma: 0.5,
        };
        assert_eq!(schedule_lr(0, &s), 1e-5);
        assert_eq!(schedule_lr(150, &s), 5e-6);
        assert_eq!(schedule_lr(250, &s), 2.5e-6);
        assert_eq!(MultiStepLr::default_milestones(100), vec![60, 85]);
    }
}
