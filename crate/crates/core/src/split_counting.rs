//! Split-Counting proxy task.
//!
//! A random rectangle splits each image into a positive part (inside) and a
//! negative part (outside, zero-filled at full extent). The model counts the
//! whole image and both parts with one set of parameters; the sum of the part
//! counts is tied to the whole-image count and to the label.

use cmlp_tensor::{BnObservation, Mode, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CrowdMlp;
use crate::params::{GradStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// A binary rectangle mask over an `side`×`side` image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub rect: Rect,
    /// `[side, side]` indicator, 1 inside the rectangle.
    pub mask: Tensor,
}

impl MaskPair {
    pub fn from_rect(rect: Rect, side: usize) -> Self {
        let mask = Tensor::from_fn(&[side, side], |i| {
            if rect.contains(i / side, i % side) {
                1.0
            } else {
                0.0
            }
        });
        Self { rect, mask }
    }

    pub fn side(&self) -> usize {
        self.mask.shape()[0]
    }

    /// Pixels inside the rectangle.
    pub fn area(&self) -> usize {
        self.rect.area()
    }
}

/// Rectangle with each side uniform in `[H/8, 7H/8]`, placed uniformly where it fits.
pub fn sample_mask(rng: &mut Rng, side: usize) -> Result<MaskPair> {
    if side < 16 {
        return Err(Error::Parameter(format!(
            "mask side {side} is below the minimum of 16"
        )));
    }
    let (lo, hi) = (side.div_ceil(8), 7 * side / 8);
    let height = rng.int_inclusive(lo, hi);
    let width = rng.int_inclusive(lo, hi);
    let top = rng.int_inclusive(0, side - height);
    let left = rng.int_inclusive(0, side - width);
    Ok(MaskPair::from_rect(
        Rect {
            top,
            left,
            height,
            width,
        },
        side,
    ))
}

/// `I_P = I × M` and `I_N = I × (1 − M)` for a `[.., H, W]` image; both keep full extent.
pub fn apply_decoupling(image: &Tensor, mask: &MaskPair) -> Result<(Tensor, Tensor)> {
    let shape = image.shape();
    let side = mask.side();
    if shape.len() < 2 || shape[shape.len() - 2] != side || shape[shape.len() - 1] != side {
        return Err(cmlp_tensor::TensorError::Dimension(format!(
            "image {shape:?} does not match a {side}x{side} mask"
        ))
        .into());
    }
    let plane = side * side;
    let m = mask.mask.data();
    let mut positive = image.clone();
    let mut negative = image.clone();
    for (i, (p, n)) in positive
        .data_mut()
        .iter_mut()
        .zip(negative.data_mut())
        .enumerate()
    {
        let inside = m[i % plane];
        *p *= inside;
        *n *= 1.0 - inside;
    }
    Ok((positive, negative))
}

/// Loss components of one example, or their batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(rename = "L_C")]
    pub l_c: f64,
    #[serde(rename = "L_SS")]
    pub l_ss: f64,
    #[serde(rename = "L_I")]
    pub l_i: f64,
    #[serde(rename = "L")]
    pub total: f64,
}

impl LossBundle {
    fn from_parts(l_c: f64, l_ss: f64, l_i: f64) -> Self {
        Self {
            l_c,
            l_ss,
            l_i,
            total: l_c + 0.5 * (l_ss + l_i),
        }
    }

    /// Component-wise mean of several bundles.
    pub fn mean(bundles: &[LossBundle]) -> Self {
        let n = bundles.len().max(1) as f64;
        let sum = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        Self::from_parts(sum(|b| b.l_c), sum(|b| b.l_ss), sum(|b| b.l_i))
    }
}

pub fn compute_losses(p_i: f64, p_p: f64, p_n: f64, c_gt: f64) -> LossBundle {
    let parts = p_p + p_n;
    LossBundle::from_parts((p_i - c_gt).abs(), (parts - p_i).abs(), (parts - c_gt).abs())
}

/// Whole, positive and negative views of one batch plus its labels.
#[derive(Clone, Debug)]
pub struct SplitBatch {
    pub whole: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub counts: Vec<f64>,
    pub masks: Vec<MaskPair>,
}

impl SplitBatch {
    /// Samples one mask per example of a `[B, 3, H, H]` batch.
    pub fn sample(images: &Tensor, counts: &[f64], rng: &mut Rng) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != counts.len() {
            return Err(Error::Parameter(format!(
                "batch {shape:?} does not match {} labels",
                counts.len()
            )));
        }
        let masks = (0..shape[0])
            .map(|_| sample_mask(rng, shape[2]))
            .collect::<Result<Vec<_>>>()?;
        Self::with_masks(images, counts, masks)
    }

    pub fn with_masks(images: &Tensor, counts: &[f64], masks: Vec<MaskPair>) -> Result<Self> {
        let shape = images.shape().to_vec();
        if masks.len() != shape[0] || counts.len() != shape[0] {
            return Err(Error::Parameter("one mask and label per example required".into()));
        }
        let per = images.numel() / shape[0];
        let mut positive = Vec::with_capacity(images.numel());
        let mut negative = Vec::with_capacity(images.numel());
        for (b, mask) in masks.iter().enumerate() {
            let one = Tensor::new(
                shape[1..].to_vec(),
                images.data()[b * per..(b + 1) * per].to_vec(),
            )?;
            let (p, n) = apply_decoupling(&one, mask)?;
            positive.extend(p.into_data());
            negative.extend(n.into_data());
        }
        Ok(Self {
            whole: images.clone(),
            positive: Tensor::new(shape.clone(), positive)?,
            negative: Tensor::new(shape, negative)?,
            counts: counts.to_vec(),
            masks,
        })
    }
}

/// Batch objective on the session's tape.
pub struct SplitLoss {
    /// Scalar loss to differentiate.
    pub loss: Var,
    /// Batch-mean components.
    pub bundle: LossBundle,
    pub per_example: Vec<LossBundle>,
    /// Normalization observations recorded by the whole-image pass; the part
    /// passes follow them on the tape.
    pub whole_observations: usize,
}

/// Runs the whole-image pass and, with the proxy enabled, both part passes on
/// one tape with one parameter binding; the loss is the batch mean of `L`.
/// With the proxy disabled the loss is `L_C` alone and the proxy terms read 0.
pub fn split_counting_loss(
    model: &CrowdMlp,
    s: &mut Session,
    batch: &SplitBatch,
    proxy: bool,
) -> Result<SplitLoss> {
    let n = batch.counts.len();
    let target = s.tape.constant(Tensor::vector(batch.counts.clone()));
    let whole = s.tape.constant(batch.whole.clone());
    let p_i = model.forward(s, whole)?.counts;
    let whole_observations = s.tape.bn_observations().len();
    let err_c = s.tape.sub(p_i, target)?;
    let l_c = s.tape.abs(err_c);
    let inv = 1.0 / n as f64;
    let sum_c = s.tape.sum(l_c);
    let mean_c = s.tape.scale(sum_c, inv);
    let p_i_vals = s.value(p_i).data().to_vec();
    if !proxy {
        let per_example: Vec<LossBundle> = p_i_vals
            .iter()
            .zip(&batch.counts)
            .map(|(p, c)| LossBundle::from_parts((p - c).abs(), 0.0, 0.0))
            .collect();
        return Ok(SplitLoss {
            loss: mean_c,
            bundle: LossBundle::mean(&per_example),
            per_example,
            whole_observations,
        });
    }
    let positive = s.tape.constant(batch.positive.clone());
    let p_p = model.forward(s, positive)?.counts;
    let negative = s.tape.constant(batch.negative.clone());
    let p_n = model.forward(s, negative)?.counts;
    let parts = s.tape.add(p_p, p_n)?;
    let err_ss = s.tape.sub(parts, p_i)?;
    let l_ss = s.tape.abs(err_ss);
    let err_i = s.tape.sub(parts, target)?;
    let l_i = s.tape.abs(err_i);
    let proxy_sum = s.tape.add(l_ss, l_i)?;
    let proxy_sum = s.tape.sum(proxy_sum);
    let proxy_mean = s.tape.scale(proxy_sum, 0.5 * inv);
    let loss = s.tape.add(mean_c, proxy_mean)?;
    let (pp, pn) = (s.value(p_p).data(), s.value(p_n).data());
    let per_example: Vec<LossBundle> = (0..n)
        .map(|b| compute_losses(p_i_vals[b], pp[b], pn[b], batch.counts[b]))
        .collect();
    Ok(SplitLoss {
        loss,
        bundle: LossBundle::mean(&per_example),
        per_example,
        whole_observations,
    })
}

/// Result of one training step's forward and backward passes.
pub struct StepOutput {
    pub bundle: LossBundle,
    pub per_example: Vec<LossBundle>,
    pub grads: GradStore,
    /// Batch statistics of the whole-image pass only: running estimates
    /// should describe unmasked inputs, the only kind seen at inference.
    pub bn_observations: Vec<BnObservation>,
}

/// Samples masks, runs the three shared-parameter passes and one combined backward.
pub fn split_counting_step(
    model: &CrowdMlp,
    images: &Tensor,
    counts: &[f64],
    rng: &mut Rng,
    mode: Mode,
    proxy: bool,
) -> Result<StepOutput> {
    let batch = SplitBatch::sample(images, counts, rng)?;
    let mut s = model.session(mode, rng.split());
    let out = split_counting_loss(model, &mut s, &batch, proxy)?;
    let grads = s.gradients(out.loss)?;
    let mut bn_observations = s.into_bn_observations();
    bn_observations.truncate(out.whole_observations);
    Ok(StepOutput {
        bundle: out.bundle,
        per_example: out.per_example,
        grads,
        bn_observations,
    })
}

/// Whole-image prediction, summed part predictions and label for one example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSample {
    pub m1: f64,
    pub m23: f64,
    pub y: f64,
}

impl EnsembleSample {
    pub fn ensemble(&self) -> f64 {
        0.5 * (self.m1 + self.m23)
    }

    /// `(M̂ − y)²`.
    pub fn ensemble_error(&self) -> f64 {
        (self.ensemble() - self.y).powi(2)
    }

    /// Mean of the two individual squared errors.
    pub fn average_error(&self) -> f64 {
        0.5 * ((self.m1 - self.y).powi(2) + (self.m23 - self.y).powi(2))
    }

    /// `(M1 − M̂)²`, the nonnegative diversity term.
    pub fn diversity(&self) -> f64 {
        (self.m1 - self.ensemble()).powi(2)
    }

    pub fn residual(&self) -> f64 {
        (self.ensemble_error() - (self.average_error() - self.diversity())).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub samples: usize,
    pub max_residual: f64,
    /// Samples whose ensemble error does not exceed the average individual error.
    pub ensemble_not_worse: usize,
}

/// Checks the ensemble error identity pointwise and reports the largest residual.
pub fn verify_decomposition(samples: &[EnsembleSample]) -> Result<DecompositionReport> {
    if samples.is_empty() {
        return Err(Error::Parameter("no samples to verify".into()));
    }
    let max_residual = samples
        .iter()
        .map(EnsembleSample::residual)
        .fold(0.0, f64::max);
    let ensemble_not_worse = samples
        .iter()
        .filter(|s| s.ensemble_error() <= s.average_error())
        .count();
    Ok(DecompositionReport {
        samples: samples.len(),
        max_residual,
        ensemble_not_worse,
    })
}

/// `n` triples with every component uniform in `[0, hi]`.
pub fn uniform_samples(n: usize, hi: f64, rng: &mut Rng) -> Vec<EnsembleSample> {
    (0..n)
        .map(|_| EnsembleSample {
            m1: rng.uniform_range(0.0, hi),
            m23: rng.uniform_range(0.0, hi),
            y: rng.uniform_range(0.0, hi),
        })
        .collect()
}
