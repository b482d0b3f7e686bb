//! Deterministic tensor math with reverse-mode gradients, finite-difference
//! checking and the AdamW update.

mod adamw;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{
    check_param_gradients, check_selected_params, finite_difference_check, relative_error,
    GradCheckReport, ABS_FALLBACK,
};
pub use graph::{
    mask_fill_value, masked_softmax_rows, reversed_cumsum, sigmoid, Gradients, Graph, Mask, Var,
};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{stream_id, Purpose, RngStream};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}

/// Lower-triangular (causal) mask for a `t×t` score matrix: entry `(i, j)`
/// is kept iff `j ≤ i`.
pub fn causal_mask(t: usize) -> Mask {
    (0..t * t)
        .map(|k| k % t <= k / t)
        .collect::<Vec<_>>()
        .into()
}
