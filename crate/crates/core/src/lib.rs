//! A small laboratory for contextual position encoding (CoPE).
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, a reverse-mode tape, gradient checks, AdamW.
//! * [`position_encoding`]: CoPE and the baseline position encodings.
//! * [`transformer`]: a pre-norm decoder-only model with pluggable encodings.
//! * [`tasks`]: Flip-Flop, Selective Copy and Counting generators.
//! * [`harness`]: configuration, training, evaluation and checkpoints.
//! * [`analysis`]: attention and gate dumps plus the relative-PE bound demo.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! two supported precisions.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod position_encoding;
pub mod scalar;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32<'p> = numerics::Graph<'p, f32>;
pub type Graph64<'p> = numerics::Graph<'p, f64>;
pub type Model32 = transformer::Model<f32>;
pub type Model64 = transformer::Model<f64>;
