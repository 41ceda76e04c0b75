//! Coarse-to-fine token streams.
//!
//! Frontend features are cut into 16×16, 8×8 and 4×4 patches, the raw image
//! into 16×16 patches; each patch is flattened and linearly projected to the
//! common token width `D`. The raw stream additionally goes through whole-token
//! dropout during training.

use cmlp_tensor::{Mode, Rng, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::frontend::DOWNSAMPLE;
use crate::params::{ParamId, ParamStore, Session};

pub const RAW_PATCH: usize = 16;
pub const RAW_DROP_RATE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    Feat16,
    Feat8,
    Feat4,
    Raw,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Feat16,
        StreamKind::Feat8,
        StreamKind::Feat4,
        StreamKind::Raw,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            StreamKind::Feat16 => "feat16",
            StreamKind::Feat8 => "feat8",
            StreamKind::Feat4 => "feat4",
            StreamKind::Raw => "raw",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Patch side on the stream's source grid (feature map or raw image).
    pub fn patch_size(self) -> usize {
        match self {
            StreamKind::Feat16 => 16,
            StreamKind::Feat8 => 8,
            StreamKind::Feat4 => 4,
            StreamKind::Raw => RAW_PATCH,
        }
    }

    pub fn is_feature(self) -> bool {
        self != StreamKind::Raw
    }

    /// Tokens produced for an `input`×`input` image.
    pub fn token_count(self, input: usize) -> usize {
        let grid = if self.is_feature() {
            input / DOWNSAMPLE
        } else {
            input
        };
        let per_side = grid / self.patch_size();
        per_side * per_side
    }

    /// Width of one flattened patch before projection.
    pub fn patch_dim(self, feature_channels: usize) -> usize {
        let p = self.patch_size();
        if self.is_feature() {
            feature_channels * p * p
        } else {
            3 * p * p
        }
    }
}

/// Which of the four streams are present; removing one mirrors the stream ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSet {
    pub feat16: bool,
    pub feat8: bool,
    pub feat4: bool,
    pub raw: bool,
}

impl Default for StreamSet {
    fn default() -> Self {
        Self::all()
    }
}

impl StreamSet {
    pub fn all() -> Self {
        Self {
            feat16: true,
            feat8: true,
            feat4: true,
            raw: true,
        }
    }

    pub fn contains(&self, kind: StreamKind) -> bool {
        match kind {
            StreamKind::Feat16 => self.feat16,
            StreamKind::Feat8 => self.feat8,
            StreamKind::Feat4 => self.feat4,
            StreamKind::Raw => self.raw,
        }
    }

    pub fn without(mut self, kind: StreamKind) -> Self {
        match kind {
            StreamKind::Feat16 => self.feat16 = false,
            StreamKind::Feat8 => self.feat8 = false,
            StreamKind::Feat4 => self.feat4 = false,
            StreamKind::Raw => self.raw = false,
        }
        self
    }

    /// Enabled streams in canonical coarse-to-fine order.
    pub fn enabled(&self) -> Vec<StreamKind> {
        StreamKind::ALL
            .into_iter()
            .filter(|&k| self.contains(k))
            .collect()
    }

    pub fn needs_frontend(&self) -> bool {
        self.feat16 || self.feat8 || self.feat4
    }
}

/// When the raw-token dropout mask is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawDropTiming {
    /// A fresh mask per token on every forward pass.
    #[default]
    PerPass,
    /// One mask over token positions per epoch, shared by every image.
    PerEpoch,
}

/// Checks that every enabled stream tiles an `input`×`input` image with at least one token.
pub fn validate_input_size(input: usize, streams: &StreamSet) -> Result<()> {
    if input < 128 {
        return config_err(format!(
            "input size {input} is below the minimum of 128 pixels"
        ));
    }
    if !input.is_multiple_of(DOWNSAMPLE) {
        return config_err(format!("input size {input} is not divisible by {DOWNSAMPLE}"));
    }
    for kind in streams.enabled() {
        let grid = if kind.is_feature() {
            input / DOWNSAMPLE
        } else {
            input
        };
        if grid % kind.patch_size() != 0 {
            return config_err(format!(
                "input size {input}: {} stream needs a grid divisible by {}, got {grid}",
                kind.tag(),
                kind.patch_size()
            ));
        }
    }
    if streams.enabled().is_empty() {
        return config_err("at least one token stream must be enabled");
    }
    Ok(())
}

/// Gather indices that cut `[.., C, S, S]` into non-overlapping `p×p` patches.
///
/// Row `k` of each output matrix is the `(c, i, j)` flattening of patch `k` in
/// row-major patch order.
fn patch_index(batch: usize, channels: usize, side: usize, p: usize) -> Vec<usize> {
    let per_side = side / p;
    let mut index = Vec::with_capacity(batch * channels * side * side);
    for b in 0..batch {
        for pi in 0..per_side {
            for pj in 0..per_side {
                for c in 0..channels {
                    for i in 0..p {
                        let row = ((b * channels + c) * side + pi * p + i) * side + pj * p;
                        index.extend(row..row + p);
                    }
                }
            }
        }
    }
    index
}

/// Split-and-reshape: `[C, S, S]` → `[(S/p)², C·p²]`, or batched `[B, C, S, S]` → `[B, (S/p)², C·p²]`.
pub fn split_reshape(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (batch, c, side, batched) = match *shape.as_slice() {
        [c, h, w] if h == w => (1, c, h, false),
        [b, c, h, w] if h == w => (b, c, h, true),
        _ => {
            return Err(TensorError::Dimension(format!(
                "split_reshape expects square [.., C, S, S], got {shape:?}"
            ))
            .into())
        }
    };
    if p == 0 || side % p != 0 {
        return Err(TensorError::Dimension(format!(
            "split_reshape: side {side} is not divisible by patch {p}"
        ))
        .into());
    }
    let count = (side / p) * (side / p);
    let out_shape = if batched {
        vec![batch, count, c * p * p]
    } else {
        vec![count, c * p * p]
    };
    Ok(tape.gather(x, patch_index(batch, c, side, p), &out_shape)?)
}

/// Inverse of [`split_reshape`] for a single `[(S/p)², C·p²]` patch matrix.
pub fn merge_patches(tokens: &Tensor, channels: usize, side: usize, p: usize) -> Result<Tensor> {
    let count = (side / p) * (side / p);
    if !side.is_multiple_of(p) || tokens.shape() != [count, channels * p * p] {
        return Err(TensorError::Dimension(format!(
            "merge_patches: {:?} is not a {p}-patch split of [{channels}, {side}, {side}]",
            tokens.shape()
        ))
        .into());
    }
    let mut out = Tensor::zeros(&[channels, side, side]);
    for (k, &src) in patch_index(1, channels, side, p).iter().enumerate() {
        out.data_mut()[src] = tokens.data()[k];
    }
    Ok(out)
}

/// Whole-token dropout for the raw stream: each token row is zeroed with
/// probability `rate`, survivors scaled by `1/(1 − rate)`; identity in eval mode.
pub fn raw_token_dropout(
    tape: &mut Tape,
    tokens: Var,
    rate: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    Ok(tape.dropout_rows(tokens, rate, rng, mode)?)
}

/// Draws a per-epoch keep mask over `count` raw token positions.
pub fn sample_epoch_mask(count: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    (0..count).map(|_| !rng.bernoulli(rate)).collect()
}

/// One projected token sequence.
#[derive(Clone, Copy, Debug)]
pub struct TokenStream {
    pub kind: StreamKind,
    /// `[B, count, D]` tokens on the pass's tape.
    pub tokens: Var,
    pub count: usize,
    pub patch_size: usize,
}

struct Projection {
    kind: StreamKind,
    weight: ParamId,
    bias: ParamId,
}

/// One linear projection per enabled stream.
pub struct Tokenizer {
    projections: Vec<Projection>,
    token_dim: usize,
    raw_drop_rate: f64,
    timing: RawDropTiming,
    epoch_mask: Option<Vec<bool>>,
}

impl Tokenizer {
    pub fn new(
        streams: &StreamSet,
        feature_channels: usize,
        token_dim: usize,
        raw_drop_rate: f64,
        timing: RawDropTiming,
        params: &mut ParamStore,
        rng: &mut Rng,
    ) -> Self {
        let projections = streams
            .enabled()
            .into_iter()
            .map(|kind| {
                let fan_in = kind.patch_dim(feature_channels);
                let std = (1.0 / fan_in as f64).sqrt();
                let weight = params.add(
                    format!("tokens.{}.weight", kind.tag()),
                    Tensor::from_fn(&[fan_in, token_dim], |_| std * rng.normal()),
                );
                let bias = params.add(
                    format!("tokens.{}.bias", kind.tag()),
                    Tensor::zeros(&[token_dim]),
                );
                Projection { kind, weight, bias }
            })
            .collect();
        Self {
            projections,
            token_dim,
            raw_drop_rate,
            timing,
            epoch_mask: None,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn timing(&self) -> RawDropTiming {
        self.timing
    }

    /// Installs the raw-token keep mask used in [`RawDropTiming::PerEpoch`] mode.
    pub fn set_epoch_mask(&mut self, mask: Option<Vec<bool>>) {
        self.epoch_mask = mask;
    }

    /// Builds the enabled streams from `[B, 3, H, H]` images and `[B, C, H/8, H/8]` features.
    pub fn build_streams(
        &self,
        s: &mut Session,
        images: Var,
        features: Option<Var>,
    ) -> Result<Vec<TokenStream>> {
        let mut out = Vec::with_capacity(self.projections.len());
        for proj in &self.projections {
            let source = if proj.kind.is_feature() {
                features.ok_or_else(|| {
                    crate::Error::Config(format!("{} stream needs frontend features", proj.kind.tag()))
                })?
            } else {
                images
            };
            let patches = split_reshape(&mut s.tape, source, proj.kind.patch_size())?;
            let (w, b) = (s.param(proj.weight), s.param(proj.bias));
            let mut tokens = s.tape.linear(patches, w, b)?;
            let shape = s.tape.shape(tokens).to_vec();
            let count = shape[shape.len() - 2];
            if proj.kind == StreamKind::Raw {
                tokens = self.drop_raw(s, tokens, &shape)?;
            }
            out.push(TokenStream {
                kind: proj.kind,
                tokens,
                count,
                patch_size: proj.kind.patch_size(),
            });
        }
        Ok(out)
    }

    fn drop_raw(&self, s: &mut Session, tokens: Var, shape: &[usize]) -> Result<Var> {
        if s.mode == Mode::Eval {
            return Ok(tokens);
        }
        match (self.timing, &self.epoch_mask) {
            (RawDropTiming::PerEpoch, Some(mask)) => {
                let count = shape[shape.len() - 2];
                if mask.len() != count {
                    return config_err(format!(
                        "epoch mask covers {} tokens, stream has {count}",
                        mask.len()
                    ));
                }
                let keep = 1.0 / (1.0 - self.raw_drop_rate);
                let per_row = self.token_dim;
                let factors = Tensor::from_fn(shape, |i| {
                    if mask[(i / per_row) % count] {
                        keep
                    } else {
                        0.0
                    }
                });
                Ok(s.tape.mul_const(tokens, &factors)?)
            }
            _ => raw_token_dropout(
                &mut s.tape,
                tokens,
                self.raw_drop_rate,
                &mut s.rng,
                s.mode,
            ),
        }
    }
}
