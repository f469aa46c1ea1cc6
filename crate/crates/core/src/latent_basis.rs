//! The learnable time-encoded subspace.
//!
//! The basis is stored as an unconstrained `dim x M` matrix and turned into an
//! orthonormal frame by modified Gram-Schmidt on every forward pass, so the
//! orthonormality constraint holds exactly (to rounding) no matter what the
//! optimizer did to the raw matrix. The Gram-Schmidt arithmetic is recorded on
//! the tape and gradients reach the raw matrix through it.

use rand::Rng;

use crate::error::{LtnError, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Smallest admissible Gram-Schmidt residual norm.
pub const DEGENERACY_THRESHOLD: f64 = 1e-8;

/// How the basis used in navigation is derived from the raw matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisMode {
    /// Gram-Schmidt every forward pass, gradients through the arithmetic.
    Orthogonalized,
    /// Gram-Schmidt values, but gradients passed straight to the raw matrix.
    StraightThrough,
    /// Raw matrix used as-is (the "without orthogonalization" ablation).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthogonalBasis {
    pub raw: ParamId,
    pub dim: usize,
    pub m: usize,
}

impl OrthogonalBasis {
    /// Gaussian entries with std `1/sqrt(dim)`, orthonormalized once.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || m >= dim {
            return Err(LtnError::invalid(format!(
                "basis size must satisfy 1 <= M < dim, got M={m}, dim={dim}"
            )));
        }
        let init = Matrix::randn(dim, m, 1.0 / (dim as f64).sqrt(), rng);
        let raw = store.add("basis.raw", orthogonalize(&init)?);
        Ok(OrthogonalBasis { raw, dim, m })
    }

    /// Navigation frame for this forward pass.
    pub fn frame(&self, tape: &mut Tape, vars: &[Var], mode: BasisMode) -> Result<Var> {
        let raw = vars[self.raw.0];
        match mode {
            BasisMode::Orthogonalized => orthogonalize_var(tape, raw),
            BasisMode::Raw => Ok(raw),
            BasisMode::StraightThrough => {
                let q = orthogonalize(tape.value(raw))?;
                let offset = tape.leaf(q.sub(tape.value(raw))?)?;
                tape.add(raw, offset)
            }
        }
    }

    /// Frame values without recording gradients.
    pub fn frame_values(&self, store: &ParamStore, mode: BasisMode) -> Result<Matrix> {
        match mode {
            BasisMode::Raw => Ok(store.get(self.raw).clone()),
            _ => orthogonalize(store.get(self.raw)),
        }
    }
}

/// Modified Gram-Schmidt on the columns of `raw`, recorded on `tape`.
pub fn orthogonalize_var(tape: &mut Tape, raw: Var) -> Result<Var> {
    let (_, m) = tape.value(raw).shape();
    if m == 0 {
        return Err(LtnError::Empty { op: "orthogonalize" });
    }
    let mut frame: Vec<Var> = Vec::with_capacity(m);
    for j in 0..m {
        let mut w = tape.slice_cols(raw, j, 1)?;
        for &q in &frame {
            let r = tape.dot(q, w)?;
            let proj = tape.scale_by(q, r)?;
            w = tape.sub(w, proj)?;
        }
        let sq = tape.dot(w, w)?;
        let norm = tape.sqrt(sq)?;
        let residual = tape.scalar(norm);
        if !(residual > DEGENERACY_THRESHOLD) {
            return Err(LtnError::DegenerateBasis { column: j, residual });
        }
        frame.push(tape.div_by(w, norm)?);
    }
    tape.concat_cols(&frame)
}

/// Orthonormal frame spanning the columns of `raw` (modified Gram-Schmidt).
pub fn orthogonalize(raw: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let v = tape.leaf(raw.clone())?;
    let q = orthogonalize_var(&mut tape, v)?;
    Ok(tape.value(q).clone())
}

/// Coordinates of each row of `v` inside span(Q): `v Q`.
pub fn span_project(v: &Matrix, q: &Matrix) -> Result<Matrix> {
    v.matmul(q).map_err(|_| LtnError::Shape {
        op: "span_project",
        left: v.shape(),
        right: q.shape(),
    })
}

/// Component of each row of `v` orthogonal to span(Q): `v - (v Q) Q^T`.
pub fn complement_residual(v: &Matrix, q: &Matrix) -> Result<Matrix> {
    let coords = span_project(v, q)?;
    let inside = coords.matmul_t(q)?;
    v.sub(&inside)
}

/// `max |Q^T Q - I|` over all entries.
pub fn orthogonality_error(q: &Matrix) -> f64 {
    let gram = q.t_matmul(q).expect("square gram");
    let mut worst = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_columns_unchanged() {
        let raw = Matrix::identity(4).columns(0, 2).unwrap();
        let q = orthogonalize(&raw).unwrap();
        assert!(q.max_abs_diff(&raw).unwrap() < 1e-15);
    }

    #[test]
    fn hand_gram_schmidt() {
        let raw = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let q = orthogonalize(&raw).unwrap();
        let expected = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert!(q.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn random_frame_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Matrix::randn(16, 4, 1.0, &mut rng);
        let q = orthogonalize(&raw).unwrap();
        assert!(orthogonality_error(&q) < 1e-10);
    }

    #[test]
    fn degenerate_column_is_named() {
        let raw = Matrix::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        match orthogonalize(&raw) {
            Err(LtnError::DegenerateBasis { column, .. }) => assert_eq!(column, 1),
            other => panic!("expected degenerate basis, got {other:?}"),
        }
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = orthogonalize(&Matrix::randn(6, 3, 1.0, &mut rng)).unwrap();
        let q1 = Matrix::row_vector(&q.column(0));
        let c = span_project(&q1, &q).unwrap();
        assert!(c.max_abs_diff(&Matrix::row_vector(&[1.0, 0.0, 0.0])).unwrap() < 1e-12);

        let v = Matrix::randn(1, 6, 1.0, &mut rng);
        let off = complement_residual(&v, &q).unwrap();
        assert!(span_project(&off, &q).unwrap().max_abs() < 1e-12);
        // An off-span vector is left alone and projects to zero.
        assert!(complement_residual(&off, &q).unwrap().max_abs_diff(&off).unwrap() < 1e-12);
        // Reconstruction: inside + outside == v.
        let inside = span_project(&v, &q).unwrap().matmul_t(&q).unwrap();
        assert!(inside.add(&off).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
        // In-span input leaves nothing behind.
        assert!(complement_residual(&inside, &q).unwrap().max_abs() < 1e-12);

        assert!(span_project(&Matrix::zeros(1, 5), &q).is_err());
    }

    #[test]
    fn gram_schmidt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Matrix::randn(6, 3, 1.0, &mut rng);
        let weights = Matrix::randn(6, 3, 1.0, &mut rng);
        let err = grad_check(
            |t, r| {
                let q = orthogonalize_var(t, r)?;
                let w = t.leaf(weights.clone())?;
                t.dot(q, w)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn straight_through_passes_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let basis = OrthogonalBasis::new(&mut store, 8, 2, &mut rng).unwrap();
        *store.get_mut(basis.raw) = Matrix::randn(8, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape).unwrap();
        let q = basis.frame(&mut tape, &vars, BasisMode::StraightThrough).unwrap();
        assert!(orthogonality_error(tape.value(q)) < 1e-12);
        let s = tape.sum(q).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vars[basis.raw.0]), Matrix::filled(8, 2, 1.0));
    }

    #[test]
    fn basis_size_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(OrthogonalBasis::new(&mut store, 4, 4, &mut rng).is_err());
        assert!(OrthogonalBasis::new(&mut store, 4, 0, &mut rng).is_err());
        let b = OrthogonalBasis::new(&mut store, 4, 3, &mut rng).unwrap();
        assert!(orthogonality_error(store.get(b.raw)) < 1e-12);
    }
}
