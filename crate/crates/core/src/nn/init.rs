use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Standard deviation of Kaiming-normal initialization for a given fan-in.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Kaiming-normal `rows × cols` matrix with fan-in `cols`, deterministic in `seed`.
pub fn kaiming_init(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kaiming_matrix(rows, cols, &mut rng)
}

pub fn kaiming_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(
            "shape",
            format!("kaiming init needs a non-empty shape, got {rows}x{cols}"),
        ));
    }
    let data = kaiming_vec(rows * cols, cols, rng);
    Matrix::new(rows, cols, data)
}

pub(crate) fn kaiming_vec<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, kaiming_std(fan_in)).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}
