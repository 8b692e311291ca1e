//! Shared fixtures for the benchmarks.

use aligned_sae::grad::random_instance;
use aligned_sae::{EncoderMode, Matrix, RngStream, SaeParams, SaeVariant};

/// Parameters and an input batch at a typical desk-scale size.
pub fn fixture(mode: EncoderMode, n: usize, m: usize, batch: usize, seed: u64) -> (SaeParams, Matrix) {
    let inst = random_instance(SaeVariant::relu(mode), n, m, batch, seed);
    (inst.params, inst.x)
}

/// A pair of dense Gaussian matrices for product benchmarks.
pub fn matrix_pair(rows: usize, inner: usize, cols: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = RngStream::new(seed);
    (rng.normal_matrix(rows, inner, 1.0), rng.normal_matrix(inner, cols, 1.0))
}
