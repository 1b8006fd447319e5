//! Deterministic inputs shared by the benchmarks.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

pub fn uniform2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    uniform(&[rows, cols], seed).into_dimensionality().unwrap()
}

/// Values in `[0, 1]`, as for pixel data.
pub fn pixels(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    uniform2(rows, cols, seed).mapv(|v| 0.5 + 0.5 * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible_and_bounded() {
        assert_eq!(uniform(&[2, 3], 1), uniform(&[2, 3], 1));
        assert!(pixels(4, 4, 2).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
