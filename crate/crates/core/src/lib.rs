//! Weakly-supervised crowd counting with a multi-granularity MLP regressor.
//!
//! The model tokenizes an image at four granularities (three from a small
//! convolutional frontend, one from raw pixels), mixes each stream with
//! MLP-mixer blocks, joins them and regresses one count. Training adds the
//! split-counting proxy: counts of a random rectangle and its complement must
//! sum to the whole-image count.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod regressor;
pub mod split_counting;
pub mod tokenizer;
pub mod train;

pub use cmlp_tensor::{Mode, Rng, Tensor};
pub use error::{Error, Result};
pub use model::{CrowdMlp, ModelConfig};
