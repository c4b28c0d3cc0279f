//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! [`Graph`] is the tape, [`ParamStore`] owns trainable parameters and their
//! accumulated gradients, and [`grad_check`] compares the two against central
//! differences. The free functions here evaluate single ops on plain tensors.

mod gradcheck;
mod graph;
mod param;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};

pub(crate) use graph::softmax_in_place;

use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Row-wise softmax of a matrix (max-subtracted).
pub fn softmax_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let mut out = x.clone();
    let c = out.last_dim();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// 3x3 valid-neighbor mean pooling of an `[H, W, d]` grid.
pub fn mean_pool_3x3_valid<R: Real>(grid: &Tensor<R>) -> Result<Tensor<R>> {
    let s = grid.shape();
    if s.len() != 3 {
        return Err(TensorError::invalid(
            "mean_pool_3x3_valid",
            format!("expected [H, W, d], got {s:?}"),
        ));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut g = Graph::new();
    let x = g.constant(grid.reshape([h * w, d])?);
    let y = g.mean_pool_3x3_valid(x, h, w, 0)?;
    g.value(y).reshape([h, w, d])
}
