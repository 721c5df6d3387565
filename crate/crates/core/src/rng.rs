//! Seeded random sources. All stochastic components draw from ChaCha8 so
//! streams are stable across platforms and crate upgrades of `rand`.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    gaussian(&[rows, cols], &mut seeded(seed))
}
