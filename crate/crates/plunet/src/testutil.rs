//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Dims, Scalar, Tensor};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1), deterministic per seed.
pub(crate) fn rand_tensor<T: Scalar>(d: Dims, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let data = (0..d.count())
        .map(|_| T::from_f64(r.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(d, data).unwrap()
}
