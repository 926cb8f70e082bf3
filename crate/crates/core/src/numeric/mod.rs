//! Dense `f64` arrays, a reverse-mode gradient tape and a finite-difference
//! oracle.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_coords, finite_diff_grad, relative_error, FD_STEP, FD_TOLERANCE};
pub use tape::{multi_head_attention, Gradients, NodeId, Tape, Tensor};

use crate::error::Result;

/// Softmax of `x` along `axis`.
pub fn softmax<'t>(x: Tensor<'t>, axis: usize) -> Result<Tensor<'t>> {
    x.softmax(axis)
}

/// Mean binary cross-entropy with logits.
pub fn bce_with_logits<'t>(logits: Tensor<'t>, targets: &[f64]) -> Result<Tensor<'t>> {
    logits.bce_with_logits(targets)
}

/// Row-paired cosine similarity of two `[n, d]` tensors, shape `[n, 1]`.
pub fn cosine_similarity<'t>(a: Tensor<'t>, b: Tensor<'t>) -> Result<Tensor<'t>> {
    if a.shape() != b.shape() {
        return Err(crate::Error::shape(
            "cosine_similarity",
            &a.shape(),
            &b.shape(),
        ));
    }
    let d = a.cols();
    let prod = a.l2_normalize_rows()?.mul(b.l2_normalize_rows()?)?;
    let ones = a.tape().constant(Array::ones(&[d, 1]));
    prod.matmul(ones)
}

/// All-pairs cosine similarity, `[n, d] × [m, d] → [n, m]`.
pub fn cosine_matrix<'t>(a: Tensor<'t>, b: Tensor<'t>) -> Result<Tensor<'t>> {
    a.l2_normalize_rows()?.matmul_t(b.l2_normalize_rows()?)
}

/// Elementwise logistic function on plain values.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
