//! Fixtures shared by the benchmarks.

use ltn_core::trainer_eval::RunConfig;
use ltn_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::randn(rows, cols, 1.0, &mut rng)
}

/// Default training config with a fixed seed.
pub fn bench_config() -> RunConfig {
    RunConfig {
        seed: 11,
        ..RunConfig::default()
    }
}
