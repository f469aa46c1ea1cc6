use ltn_core::latent_basis::{complement_residual, orthogonality_error, orthogonalize, span_project};
use ltn_core::selftest::{subspace_locality_error, tape_linearity_error};
use ltn_core::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frame(dim: usize, m: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthogonalize(&Matrix::randn(dim, m, 1.0, &mut rng)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_schmidt_is_orthonormal(dim in 2usize..40, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = 1 + ((dim - 1) as f64 * m_frac) as usize;
        prop_assert!(orthogonality_error(&frame(dim, m, seed)) < 1e-10);
    }

    #[test]
    fn span_and_complement_reconstruct(dim in 2usize..32, seed in any::<u64>()) {
        let q = frame(dim, 1 + dim / 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let v = Matrix::randn(5, dim, 2.0, &mut rng);
        let inside = span_project(&v, &q).unwrap().matmul_t(&q).unwrap();
        let rest = complement_residual(&v, &q).unwrap();
        prop_assert!(inside.add(&rest).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
        // The residual has no component along any frame direction.
        prop_assert!(span_project(&rest, &q).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn linear_transform_stays_in_subspace(seed in any::<u64>()) {
        prop_assert!(subspace_locality_error(40, seed).unwrap() < 1e-9);
    }

    #[test]
    fn tape_is_linear_in_the_seed(seed in any::<u64>()) {
        prop_assert!(tape_linearity_error(seed).unwrap() < 1e-12);
    }
}
