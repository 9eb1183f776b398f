//! Seeded randomness. Every stochastic component draws from a SplitMix64
//! stream so runs are reproducible from a single `u64` seed.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;

use crate::tensor::{Element, Tensor};

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose.
pub fn derive(seed: u64, stream: u64) -> SplitMix64 {
    let mut base = seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    seeded(base.random())
}

pub fn normal_tensor<T: Element>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

pub fn uniform_tensor<T: Element>(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}
