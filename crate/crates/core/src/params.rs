//! Named parameter storage, normalization state and per-pass bindings.

use std::collections::HashMap;

use cmlp_tensor::{BnObservation, BnRunning, Gradients, Mode, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Running statistics for every normalization layer, by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStore {
    names: Vec<String>,
    layers: Vec<BnRunning>,
}

impl BnStore {
    pub fn add(&mut self, name: impl Into<String>, features: usize) -> BnId {
        self.names.push(name.into());
        self.layers.push(BnRunning::new(features));
        BnId(self.layers.len() - 1)
    }

    pub fn get(&self, id: BnId) -> &BnRunning {
        &self.layers[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnRunning)> {
        self.names.iter().map(String::as_str).zip(&self.layers)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnRunning)> {
        self.names.iter().map(String::as_str).zip(self.layers.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Folds train-mode batch statistics into the running estimates, in the order observed.
    pub fn apply(&mut self, observations: &[BnObservation]) {
        for obs in observations {
            self.layers[obs.layer].update(obs);
        }
    }
}

/// Gradient for every parameter of a [`ParamStore`], aligned by id.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| Some(Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.grads.iter().map(Option::as_ref)
    }

    /// Sums `other` into `self`; a missing entry on either side stays missing only if both are.
    pub fn accumulate(&mut self, other: &GradStore) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::Parameter("gradient sets of different models".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(c);
        }
    }

    /// Euclidean norm over all present entries.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// One forward pass: a tape plus the lazily bound parameter leaves it uses.
///
/// Parameters are copied onto the tape on first use, so every pass observes a
/// single snapshot even if the store changes afterwards.
pub struct Session<'m> {
    pub tape: Tape,
    params: &'m ParamStore,
    bn: &'m BnStore,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub rng: Rng,
}

impl<'m> Session<'m> {
    pub fn new(params: &'m ParamStore, bn: &'m BnStore, mode: Mode, rng: Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bn,
            bound: vec![None; params.len()],
            mode,
            rng,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Normalization through layer `id`: batch statistics in train mode,
    /// running statistics in eval mode.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, id: BnId, axis: usize) -> Result<Var> {
        let running = self.bn.get(id);
        Ok(self.tape.batch_norm(x, gamma, beta, running, axis, self.mode, id.0)?)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward from `loss`; parameters never touched by the pass get zero gradients.
    pub fn gradients(&self, loss: Var) -> Result<GradStore> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .zip(&self.params.tensors)
            .map(|(b, t)| {
                Some(
                    b.and_then(|v| grads.take(v))
                        .unwrap_or_else(|| Tensor::zeros(t.shape())),
                )
            })
            .collect();
        Ok(GradStore { grads })
    }

    pub fn into_bn_observations(mut self) -> Vec<BnObservation> {
        self.tape.take_bn_observations()
    }
}
