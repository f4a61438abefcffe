//! Deterministic inputs shared by the benchmark suite.

use bvqa_core::{HeadConfig, HeadParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::matrix(rows, cols, uniform(rows * cols, seed)).expect("matrix shape")
}

/// A randomly initialised head with the default dimensions.
pub fn head(seed: u64) -> HeadParams {
    HeadParams::init(&HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).expect("default head")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible() {
        assert_eq!(uniform(5, 1), uniform(5, 1));
        assert_eq!(matrix(2, 3, 4).shape(), &[2, 3]);
        assert_eq!(head(0), head(0));
    }
}
