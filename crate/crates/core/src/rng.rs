//! Named, splittable, seeded random streams.
//!
//! Every stochastic call site receives an explicit [`RngStream`]. Child streams are
//! derived from the parent's key and a label, never from the parent's draw state, so
//! adding a draw in one place cannot shift the randomness seen elsewhere.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(mix(seed))
    }

    fn from_key(key: u64) -> Self {
        Self {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Child stream identified by `label`; independent of how much the parent has drawn.
    pub fn split(&self, label: &str) -> Self {
        Self::from_key(mix(self.key ^ fnv1a(label.as_bytes())))
    }

    /// Child stream identified by `label` and an index (e.g. a step or sample number).
    pub fn split_indexed(&self, label: &str, index: u64) -> Self {
        Self::from_key(mix(mix(self.key ^ fnv1a(label.as_bytes())) ^ index))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal<T: Real>(&mut self) -> T {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        T::c(z)
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize, std: f64) -> alloc::vec::Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.inner);
                T::c(z * std)
            })
            .collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
