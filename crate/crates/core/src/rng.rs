//! Seeded random streams. Every stochastic step takes an explicit seed so that
//! corpora, datasets and training runs replay exactly.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::Real;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a labelled sub-stream, e.g. `derive_seed(master, &[size, ratio, rep])`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn normal<T: Real>(rng: &mut Rng) -> T {
    T::from_f64c(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vec<T: Real>(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| normal(rng)).collect()
}
