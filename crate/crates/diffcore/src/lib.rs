//! Dense multi-dimensional `f64` arrays with tape-based reverse-mode
//! automatic differentiation, plus the first-order optimizers used by the
//! rest of the workspace.
//!
//! The design is a Wengert list: every primitive operation is recorded on a
//! [`Tape`] during the forward pass and replayed in reverse by
//! [`Tape::backward`] to accumulate gradients into the leaves. Values are
//! computed eagerly, so a [`Var`] handle always has a concrete [`Tensor`]
//! behind it.
//!
//! Determinism: every reduction in this crate (sums, matmul rows, conv
//! accumulators) runs in a fixed order regardless of thread count, so
//! identical inputs produce bit-identical values and gradients.

mod error;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub mod check;

pub use error::DiffError;
pub use optim::{AdamConfig, AdamState, GradAccum, ParamSet};
pub use tape::{CustomVjp, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable softplus, `ln(1 + e^x)`.
///
/// Computed as `max(x, 0) + log1p(exp(-|x|))` so large positive and
/// negative arguments neither overflow nor lose precision.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fixed-order pairwise tree sum.
///
/// Serial and parallel callers agree bitwise because the tree splits at
/// fixed midpoints independent of scheduling.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}
