//! Shared fixtures for the benchmarks.

use diveq::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows x cols` standard-uniform matrix in `[-1, 1)`, fixed by `seed`.
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// A batch of latents and a codebook of matching width.
pub fn batch_and_codebook(n: usize, k: usize, d: usize) -> (Tensor, Tensor) {
    (uniform(n, d, 1), uniform(k, d, 2))
}

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}
