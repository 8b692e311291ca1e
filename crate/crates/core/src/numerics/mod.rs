//! Dense linear algebra, seeded randomness and the Adam update.

mod adam;
mod matrix;
mod rng;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use matrix::{
    column_norms, cosine_similarity, dot, matmul, matmul_nt, matmul_tn, norm, Matrix, Shape,
    COSINE_ZERO_NORM,
};
pub use rng::{streams, RngStream};

use crate::error::Result;

/// Adam step on a whole matrix.
pub fn adam_update(state: &mut AdamState, params: &mut Matrix, grads: &Matrix, lr: f64) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(crate::error::Error::dims(
            "adam_update",
            params.shape(),
            grads.shape(),
        ));
    }
    state.update(params.as_mut_slice(), grads.as_slice(), lr)
}
