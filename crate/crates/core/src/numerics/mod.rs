//! Dense matrices and the reverse-mode tape every other module builds on.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use matrix::{dot, Matrix};
pub use tape::{l2_normalize_rows, softmax_rows, Gradients, Tape, Var};

use crate::error::{LtnError, Result};

/// Default lower bound on a norm before a vector counts as collapsed.
pub const NORM_EPS: f64 = 1e-12;

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Softmax of a `1 x M` row vector.
pub fn softmax(v: &Matrix) -> Result<Matrix> {
    if v.rows() != 1 {
        return Err(LtnError::Shape {
            op: "softmax",
            left: v.shape(),
            right: (1, v.cols()),
        });
    }
    softmax_rows(v)
}

/// Unit-normalizes a `1 x n` row vector.
pub fn l2_normalize(v: &Matrix) -> Result<Matrix> {
    if v.rows() != 1 {
        return Err(LtnError::Shape {
            op: "l2_normalize",
            left: v.shape(),
            right: (1, v.cols()),
        });
    }
    l2_normalize_rows(v, NORM_EPS)
}
