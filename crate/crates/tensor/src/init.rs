//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Float;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Float>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
}

/// Kaiming-uniform weights for a layer followed by a leaky ReLU of the given
/// negative slope: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform<T: Float>(rng: &mut impl Rng, n: usize, fan_in: usize, negative_slope: f64) -> Vec<T> {
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    uniform(rng, n, bound)
}
