//! Locally-focused convolutional frontend.
//!
//! A small VGG-style stack: three blocks of `[conv3×3 → BN → relu] × n`
//! followed by 2×2 max pooling, then a 1×1 convolution that narrows the
//! channel width. Output resolution is exactly one eighth of the input.

use std::path::PathBuf;

use cmlp_tensor::{Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::{BnId, BnStore, ParamId, ParamStore, Session};

/// Number of pooling stages; fixes the downsampling factor at 8.
pub const POOL_STAGES: usize = 3;
pub const DOWNSAMPLE: usize = 1 << POOL_STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub block_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub reduced_channels: usize,
    /// Checkpoint whose `frontend.*` arrays replace the random initialization.
    pub weights_path: Option<PathBuf>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![16, 32, 64],
            convs_per_block: 2,
            reduced_channels: 32,
            weights_path: None,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != POOL_STAGES {
            return config_err(format!(
                "frontend needs exactly {POOL_STAGES} blocks, got {}",
                self.block_channels.len()
            ));
        }
        if self.block_channels.contains(&0) || self.convs_per_block == 0 {
            return config_err("frontend widths and depth must be positive");
        }
        if self.reduced_channels == 0 {
            return config_err("reduced_channels must be at least 1");
        }
        Ok(())
    }
}

struct ConvBnRelu {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: BnId,
}

/// Parameter handles of the frontend; the tensors live in the model's [`ParamStore`].
pub struct Frontend {
    config: FrontendConfig,
    blocks: Vec<Vec<ConvBnRelu>>,
    reduce_weight: ParamId,
    reduce_bias: ParamId,
}

/// Kaiming-style fan-in normal initialization.
pub(crate) fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

impl Frontend {
    pub fn new(
        config: &FrontendConfig,
        params: &mut ParamStore,
        bn: &mut BnStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut c_in = 3;
        let mut blocks = Vec::with_capacity(POOL_STAGES);
        for (b, &width) in config.block_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for c in 0..config.convs_per_block {
                let prefix = format!("frontend.block{b}.conv{c}");
                convs.push(ConvBnRelu {
                    weight: params.add(
                        format!("{prefix}.weight"),
                        kaiming(&[width, c_in, 3, 3], c_in * 9, rng),
                    ),
                    bias: params.add(format!("{prefix}.bias"), Tensor::zeros(&[width])),
                    gamma: params.add(format!("{prefix}.bn.gamma"), Tensor::full(&[width], 1.0)),
                    beta: params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[width])),
                    bn: bn.add(format!("{prefix}.bn"), width),
                });
                c_in = width;
            }
            blocks.push(convs);
        }
        let rc = config.reduced_channels;
        let reduce_weight = params.add(
            "frontend.reduce.weight",
            kaiming(&[rc, c_in, 1, 1], c_in, rng),
        );
        let reduce_bias = params.add("frontend.reduce.bias", Tensor::zeros(&[rc]));
        Ok(Self {
            config: config.clone(),
            blocks,
            reduce_weight,
            reduce_bias,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.reduced_channels
    }

    /// Maps `[B, 3, H, H]` images to `[B, reduced_channels, H/8, H/8]` features.
    pub fn extract_features(&self, s: &mut Session, images: Var) -> Result<Var> {
        let shape = s.tape.shape(images).to_vec();
        let side = match *shape.as_slice() {
            [_, 3, h, w] if h == w => h,
            [3, h, w] if h == w => h,
            _ => {
                return Err(Error::Parameter(format!(
                    "frontend expects square 3-channel images, got {shape:?}"
                )))
            }
        };
        if side % DOWNSAMPLE != 0 {
            return Err(cmlp_tensor::TensorError::Dimension(format!(
                "image side {side} is not divisible by {DOWNSAMPLE}"
            ))
            .into());
        }
        let channel_axis = shape.len() - 3;
        let mut x = images;
        for block in &self.blocks {
            for layer in block {
                let (w, b) = (s.param(layer.weight), s.param(layer.bias));
                x = s.tape.conv2d(x, w, b, 1, 1)?;
                let (g, be) = (s.param(layer.gamma), s.param(layer.beta));
                x = s.batch_norm(x, g, be, layer.bn, channel_axis)?;
                x = s.tape.relu(x);
            }
            x = s.tape.max_pool2(x)?;
        }
        let (w, b) = (s.param(self.reduce_weight), s.param(self.reduce_bias));
        Ok(s.tape.conv2d(x, w, b, 1, 0)?)
    }
}
