//! Seeded random instances for oracle checks and benchmarks.

use rand::Rng;

use crate::factor::FactorBlock;
use crate::linalg::Matrix;

/// Matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Second-order factor block of the given rank, head count and feature size.
pub fn random_block<R: Rng + ?Sized>(
    rank: usize,
    heads: usize,
    dim: usize,
    rng: &mut R,
) -> FactorBlock {
    FactorBlock {
        a: random_matrix(rank, heads, rng),
        b: random_matrix(rank, dim, rng),
        c: None,
    }
}
