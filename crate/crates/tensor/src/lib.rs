//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine supplies exactly the primitives a small MLP/conv counting model
//! needs: affine maps, 2-D convolution, pooling, normalization, dropout and the
//! reshaping/joining operations used to build token sequences.

mod error;
mod gemm;
pub mod gradcheck;
mod norm;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_coords};
pub use norm::{BnObservation, BnRunning, Mode, BN_EPS, BN_MOMENTUM};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
