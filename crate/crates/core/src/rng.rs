//! Seeded randomness shared by every stochastic component.
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub type Prng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Derive an independent stream from `rng` for a sub-task.
pub fn fork(rng: &mut Prng) -> Prng {
    Prng::seed_from_u64(rng.random())
}

pub fn normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn index(rng: &mut Prng, n: usize) -> usize {
    rng.random_range(0..n)
}
