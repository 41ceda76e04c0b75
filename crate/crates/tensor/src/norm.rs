use serde::{Deserialize, Serialize};

/// Forward-pass regime: train mode samples dropout masks and uses batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Folds one batch observation in with momentum [`BN_MOMENTUM`].
    pub fn update(&mut self, obs: &BnObservation) {
        for (r, m) in self.mean.iter_mut().zip(&obs.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.var.iter_mut().zip(&obs.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Batch statistics seen by a train-mode normalization (variance is the unbiased estimate).
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}
