//! Seeded random streams. Every random draw in the crate goes through here so
//! results depend only on `(seed, stream)` and never on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<T: Scalar>(rng: &mut SeededRng, std: T) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z) * std
}

pub fn uniform01<T: Scalar>(rng: &mut SeededRng) -> T {
    T::of(rng.random::<f64>())
}

/// Mixes two integers into one seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
