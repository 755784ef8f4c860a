//! Seeded randomness plumbing.
//!
//! Every random draw in the simulator flows from one master seed through
//! named child streams, so a change in how one subsystem consumes
//! randomness cannot perturb the draws seen by another. Streams are
//! ChaCha8 generators keyed by `(master_seed, stream name, indices)`;
//! one-shot decisions (availability, dropout) use a stateless hash of the
//! same key material so they are independent of evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; good avalanche for seed derivation.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives child seeds from a master seed and a stream name.
#[derive(Debug, Clone, Copy)]
pub struct SeedSpace {
    master: u64,
}

impl SeedSpace {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Seed for the named stream.
    pub fn stream(&self, name: &str) -> u64 {
        mix64(self.master ^ fnv1a(name.as_bytes()))
    }

    /// Seed for the named stream further keyed by integer indices
    /// (device id, day, round id, ...).
    pub fn keyed(&self, name: &str, keys: &[u64]) -> u64 {
        let mut s = self.stream(name);
        for &k in keys {
            s = mix64(s ^ k);
        }
        s
    }

    pub fn rng(&self, name: &str, keys: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.keyed(name, keys))
    }
}

/// Maps a u64 to the unit interval [0, 1) with 53-bit resolution.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Order-independent Bernoulli draw for one-shot gate decisions.
pub fn hash_bernoulli(seed: u64, p: f64) -> bool {
    unit_f64(mix64(seed)) < p
}

pub fn next_unit(rng: &mut ChaCha8Rng) -> f64 {
    unit_f64(rng.next_u64())
}

pub fn uniform(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    low + next_unit(rng) * (high - low)
}

/// Integer in [0, n) without allocation; modulo bias is irrelevant at
/// simulation scale.
pub fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    rng.next_u64() % n
}

/// In-place Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Knuth's product-of-uniforms Poisson sampler; fine for the small rates
/// used for per-day impression counts.
pub fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let limit = (-rate).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= next_unit(rng);
        if p <= limit {
            return k;
        }
        k += 1;
        if k > 10_000 {
            return k; // rate misconfiguration guard
        }
    }
}

/// Box-Muller normal draw truncated to [low, high] by rejection, falling
/// back to a clamp if the window is far in the tail.
pub fn normal_truncated(rng: &mut ChaCha8Rng, mean: f64, sd: f64, low: f64, high: f64) -> f64 {
    if sd <= 0.0 {
        return mean.clamp(low, high);
    }
    for _ in 0..64 {
        let u1 = next_unit(rng).max(f64::MIN_POSITIVE);
        let u2 = next_unit(rng);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let x = mean + sd * z;
        if x >= low && x <= high {
            return x;
        }
    }
    mean.clamp(low, high)
}
