//! Multi-granularity MLP regressor.
//!
//! Each stream passes through its own head of mixing blocks; the head outputs
//! are joined along the token axis, refined by a deeper top encoder and reduced
//! to one unclamped count by a small pooled MLP.

use cmlp_tensor::{Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{BnId, BnStore, ParamId, ParamStore, Session};
use crate::tokenizer::TokenStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub head_depth: usize,
    pub top_depth: usize,
    /// Hidden width of token mixing; `None` uses the token count.
    pub token_hidden: Option<usize>,
    /// Channel-mixing hidden width as a multiple of `D`.
    pub channel_hidden_mult: usize,
    pub dropout: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            head_depth: 1,
            top_depth: 3,
            token_hidden: None,
            channel_hidden_mult: 2,
            dropout: 0.1,
        }
    }
}

/// Which axis of a mixing block's `[.., rows, width]` input supplies the
/// normalization features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// One feature per column of the block width.
    Width,
    /// One feature per row; statistics pool the batch and the width.
    Rows,
}

/// Two fully-connected layers with relu and dropout, a residual connection and
/// batch normalization.
pub struct MixingBlock {
    pub width: usize,
    pub hidden: usize,
    pub norm: NormAxis,
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnId,
    pub drop: f64,
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

impl MixingBlock {
    /// `norm_features` is the extent of the axis chosen by `norm`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        width: usize,
        hidden: usize,
        norm: NormAxis,
        norm_features: usize,
        drop: f64,
        params: &mut ParamStore,
        bn: &mut BnStore,
        rng: &mut Rng,
    ) -> Self {
        Self {
            width,
            hidden,
            norm,
            w0: params.add(format!("{name}.fc0.weight"), uniform_fan_in(&[width, hidden], width, rng)),
            b0: params.add(format!("{name}.fc0.bias"), uniform_fan_in(&[hidden], width, rng)),
            w1: params.add(format!("{name}.fc1.weight"), uniform_fan_in(&[hidden, width], hidden, rng)),
            b1: params.add(format!("{name}.fc1.bias"), uniform_fan_in(&[width], hidden, rng)),
            gamma: params.add(format!("{name}.bn.gamma"), Tensor::full(&[norm_features], 1.0)),
            beta: params.add(format!("{name}.bn.beta"), Tensor::zeros(&[norm_features])),
            bn: bn.add(format!("{name}.bn"), norm_features),
            drop,
        }
    }

    /// `F = drop(relu(f1(X))); F = drop(relu(f2(F))); BN(F + X)`, mixing along the last axis of `x`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w0, b0) = (s.param(self.w0), s.param(self.b0));
        let f = s.tape.linear(x, w0, b0)?;
        let f = s.tape.relu(f);
        let f = s.tape.dropout(f, self.drop, &mut s.rng, s.mode)?;
        let (w1, b1) = (s.param(self.w1), s.param(self.b1));
        let f = s.tape.linear(f, w1, b1)?;
        let f = s.tape.relu(f);
        let f = s.tape.dropout(f, self.drop, &mut s.rng, s.mode)?;
        let sum = s.tape.add(f, x)?;
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let rank = s.tape.shape(sum).len();
        let axis = match self.norm {
            NormAxis::Width => rank - 1,
            NormAxis::Rows => rank - 2,
        };
        s.batch_norm(sum, g, b, self.bn, axis)
    }
}

/// Token mixing followed by channel mixing; preserves `[.., count, D]`.
///
/// Both halves normalize per token position, pooling statistics over the
/// batch and the channels. Per-channel statistics would pin the batch mean of
/// every token-pooled channel, which erases the absolute count signal the
/// count head reads in train mode.
pub struct TmlpBlock {
    pub token_mix: MixingBlock,
    pub channel_mix: MixingBlock,
}

impl TmlpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        count: usize,
        dim: usize,
        config: &RegressorConfig,
        params: &mut ParamStore,
        bn: &mut BnStore,
        rng: &mut Rng,
    ) -> Self {
        let token_hidden = config.token_hidden.unwrap_or(count);
        Self {
            token_mix: MixingBlock::new(
                &format!("{name}.token_mix"),
                count,
                token_hidden,
                NormAxis::Width,
                count,
                config.dropout,
                params,
                bn,
                rng,
            ),
            channel_mix: MixingBlock::new(
                &format!("{name}.channel_mix"),
                dim,
                config.channel_hidden_mult * dim,
                NormAxis::Rows,
                count,
                config.dropout,
                params,
                bn,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &mut Session, tokens: Var) -> Result<Var> {
        let rank = s.tape.shape(tokens).len();
        let (tok_axis, ch_axis) = (rank - 2, rank - 1);
        let x = s.tape.transpose(tokens, tok_axis, ch_axis)?;
        let x = self.token_mix.forward(s, x)?;
        let x = s.tape.transpose(x, tok_axis, ch_axis)?;
        self.channel_mix.forward(s, x)
    }
}

fn stack_forward(blocks: &[TmlpBlock], s: &mut Session, mut x: Var) -> Result<Var> {
    for block in blocks {
        x = block.forward(s, x)?;
    }
    Ok(x)
}

/// Regressor outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct RegressorOutput {
    /// `[B]` predicted counts.
    pub counts: Var,
    /// `[B, N, D]` joined head outputs before the top encoder.
    pub holistic: Var,
}

pub struct Regressor {
    heads: Vec<Vec<TmlpBlock>>,
    head_counts: Vec<usize>,
    top: Vec<TmlpBlock>,
    pool_fc0: (ParamId, ParamId),
    pool_fc1: (ParamId, ParamId),
    count_scale: f64,
}

impl Regressor {
    /// `stream_counts` lists, in stream order, the token count of every enabled stream.
    pub fn new(
        stream_counts: &[(String, usize)],
        dim: usize,
        config: &RegressorConfig,
        count_scale: f64,
        params: &mut ParamStore,
        bn: &mut BnStore,
        rng: &mut Rng,
    ) -> Self {
        let heads = stream_counts
            .iter()
            .map(|(tag, count)| {
                (0..config.head_depth)
                    .map(|d| {
                        TmlpBlock::new(
                            &format!("regressor.head.{tag}.{d}"),
                            *count,
                            dim,
                            config,
                            params,
                            bn,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let total: usize = stream_counts.iter().map(|(_, c)| c).sum();
        let top = (0..config.top_depth)
            .map(|d| TmlpBlock::new(&format!("regressor.top.{d}"), total, dim, config, params, bn, rng))
            .collect();
        let half = (dim / 2).max(1);
        let pool_fc0 = (
            params.add("regressor.count.fc0.weight", uniform_fan_in(&[dim, half], dim, rng)),
            params.add("regressor.count.fc0.bias", uniform_fan_in(&[half], dim, rng)),
        );
        let pool_fc1 = (
            params.add("regressor.count.fc1.weight", uniform_fan_in(&[half, 1], half, rng)),
            params.add("regressor.count.fc1.bias", Tensor::zeros(&[1])),
        );
        Self {
            heads,
            head_counts: stream_counts.iter().map(|(_, c)| *c).collect(),
            top,
            pool_fc0,
            pool_fc1,
            count_scale,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.head_counts.iter().sum()
    }

    pub fn count_scale(&self) -> f64 {
        self.count_scale
    }

    /// Ids of the count head's final bias, the one path that survives zeroed weights.
    pub fn count_bias(&self) -> ParamId {
        self.pool_fc1.1
    }

    pub fn regress_count(&self, s: &mut Session, streams: &[TokenStream]) -> Result<RegressorOutput> {
        if streams.len() != self.heads.len() {
            return crate::error::config_err(format!(
                "regressor built for {} streams, got {}",
                self.heads.len(),
                streams.len()
            ));
        }
        let mut embeddings = Vec::with_capacity(streams.len());
        for ((stream, head), &count) in streams.iter().zip(&self.heads).zip(&self.head_counts) {
            if stream.count != count {
                return crate::error::config_err(format!(
                    "{} stream has {} tokens, head expects {count}",
                    stream.kind.tag(),
                    stream.count
                ));
            }
            embeddings.push(stack_forward(head, s, stream.tokens)?);
        }
        let token_axis = s.tape.shape(embeddings[0]).len() - 2;
        let holistic = s.tape.concat(&embeddings, token_axis)?;
        let refined = stack_forward(&self.top, s, holistic)?;
        let pooled = s.tape.reduce_mean(refined, token_axis)?;
        let (w, b) = (s.param(self.pool_fc0.0), s.param(self.pool_fc0.1));
        let h = s.tape.linear(pooled, w, b)?;
        let h = s.tape.relu(h);
        let (w, b) = (s.param(self.pool_fc1.0), s.param(self.pool_fc1.1));
        let out = s.tape.linear(h, w, b)?;
        let batch = s.tape.value(out).numel();
        let out = s.tape.reshape(out, &[batch])?;
        let counts = if self.count_scale == 1.0 {
            out
        } else {
            s.tape.scale(out, self.count_scale)
        };
        Ok(RegressorOutput { counts, holistic })
    }
}
