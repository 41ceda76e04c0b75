//! The assembled counter: frontend, tokenizer and regressor over one parameter set.

use cmlp_tensor::{Mode, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::frontend::{Frontend, FrontendConfig};
use crate::params::{BnStore, ParamStore, Session};
use crate::regressor::{Regressor, RegressorConfig};
use crate::tokenizer::{
    sample_epoch_mask, validate_input_size, RawDropTiming, StreamKind, StreamSet, Tokenizer,
    RAW_DROP_RATE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square model input in pixels.
    pub input_size: usize,
    pub token_dim: usize,
    pub streams: StreamSet,
    pub frontend: FrontendConfig,
    pub regressor: RegressorConfig,
    pub raw_drop_rate: f64,
    pub raw_drop_timing: RawDropTiming,
    /// Constant multiplier on the count head output.
    pub count_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            token_dim: 64,
            streams: StreamSet::all(),
            frontend: FrontendConfig::default(),
            regressor: RegressorConfig::default(),
            raw_drop_rate: RAW_DROP_RATE,
            raw_drop_timing: RawDropTiming::PerPass,
            count_scale: 1.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 128,
            token_dim: 16,
            frontend: FrontendConfig {
                block_channels: vec![4, 8, 8],
                convs_per_block: 2,
                reduced_channels: 8,
                weights_path: None,
            },
            ..Self::default()
        }
    }

    /// Full-size layout: 256 inputs, `D = 256`.
    pub fn full() -> Self {
        Self {
            input_size: 256,
            token_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_input_size(self.input_size, &self.streams)?;
        if self.token_dim < 2 {
            return config_err("token_dim must be at least 2");
        }
        if !(0.0..1.0).contains(&self.raw_drop_rate) || !(0.0..1.0).contains(&self.regressor.dropout) {
            return config_err("dropout rates must lie in [0, 1)");
        }
        if !self.count_scale.is_finite() || self.count_scale <= 0.0 {
            return config_err("count_scale must be positive");
        }
        if self.regressor.channel_hidden_mult == 0 || self.regressor.token_hidden == Some(0) {
            return config_err("mixing hidden widths must be positive");
        }
        self.frontend.validate()
    }

    /// Token count of every enabled stream, in stream order.
    pub fn stream_counts(&self) -> Vec<(StreamKind, usize)> {
        self.streams
            .enabled()
            .into_iter()
            .map(|k| (k, k.token_count(self.input_size)))
            .collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.stream_counts().iter().map(|(_, c)| c).sum()
    }
}

/// Per-batch model outputs on a session's tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B]` predicted counts.
    pub counts: Var,
    /// `[B, N, D]` joined head embeddings.
    pub holistic: Var,
}

pub struct CrowdMlp {
    config: ModelConfig,
    pub params: ParamStore,
    pub bn: BnStore,
    frontend: Option<Frontend>,
    tokenizer: Tokenizer,
    regressor: Regressor,
}

impl CrowdMlp {
    /// Builds a freshly initialized model; frontend weights are then loaded if configured.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let mut params = ParamStore::default();
        let mut bn = BnStore::default();
        let frontend = if config.streams.needs_frontend() {
            Some(Frontend::new(&config.frontend, &mut params, &mut bn, &mut rng)?)
        } else {
            None
        };
        let tokenizer = Tokenizer::new(
            &config.streams,
            config.frontend.reduced_channels,
            config.token_dim,
            config.raw_drop_rate,
            config.raw_drop_timing,
            &mut params,
            &mut rng,
        );
        let counts: Vec<(String, usize)> = config
            .stream_counts()
            .into_iter()
            .map(|(k, c)| (k.tag().to_string(), c))
            .collect();
        let regressor = Regressor::new(
            &counts,
            config.token_dim,
            &config.regressor,
            config.count_scale,
            &mut params,
            &mut bn,
            &mut rng,
        );
        let mut model = Self {
            config: config.clone(),
            params,
            bn,
            frontend,
            tokenizer,
            regressor,
        };
        if let Some(path) = &config.frontend.weights_path {
            crate::checkpoint::load_frontend_weights(path, &mut model)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    pub fn session(&self, mode: Mode, rng: Rng) -> Session<'_> {
        Session::new(&self.params, &self.bn, mode, rng)
    }

    /// Draws a fresh per-epoch raw-token mask when that timing is selected.
    pub fn begin_epoch(&mut self, rng: &mut Rng) {
        if self.config.raw_drop_timing == RawDropTiming::PerEpoch && self.config.streams.raw {
            let count = StreamKind::Raw.token_count(self.config.input_size);
            let mask = sample_epoch_mask(count, self.config.raw_drop_rate, rng);
            self.tokenizer.set_epoch_mask(Some(mask));
        }
    }

    /// Forward pass over `[B, 3, H, H]` images already on the session's tape.
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<ModelOutput> {
        let shape = s.tape.shape(images).to_vec();
        let h = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != h {
            return Err(crate::Error::Parameter(format!(
                "model expects [B, 3, {h}, {h}] images, got {shape:?}"
            )));
        }
        let features = match &self.frontend {
            Some(f) => Some(f.extract_features(s, images)?),
            None => None,
        };
        let streams = self.tokenizer.build_streams(s, images, features)?;
        let out = self.regressor.regress_count(s, &streams)?;
        Ok(ModelOutput {
            counts: out.counts,
            holistic: out.holistic,
        })
    }

    /// Eval-mode counts and mean-pooled embeddings for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut s = self.session(Mode::Eval, Rng::new(0));
        let x = s.tape.constant(images.clone());
        let out = self.forward(&mut s, x)?;
        let axis = 1;
        let pooled = s.tape.reduce_mean(out.holistic, axis)?;
        Ok((s.value(out.counts).data().to_vec(), s.value(pooled).clone()))
    }
}
