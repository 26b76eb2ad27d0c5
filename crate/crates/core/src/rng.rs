//! Counter-based pseudo-random number generator.
//!
//! The whole pipeline draws randomness from SplitMix64: output `i` of a
//! stream seeded with `s` is `mix64(s + i * 0x9E3779B97F4A7C15)`, where
//! `mix64` is the finalizer from Vigna's SplitMix64. Because each output is
//! a pure function of `(seed, counter)`, every platform reproduces the same
//! dropout masks, initializations, shuffles, and subsamples bit-identically.
//!
//! Independent streams for different purposes are carved out of a base seed
//! with [`Rng::derive`], which hashes a label into a new seed. This keeps
//! e.g. batch shuffling independent of dropout draws, so adding a consumer
//! never perturbs the others.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit digest; used for stream derivation and file integrity.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// SplitMix64 stream positioned at a counter.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// A new independent stream labeled by purpose.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(mix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    /// A new independent stream indexed by number (e.g. per epoch).
    pub fn derive_u64(&self, index: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(index.wrapping_add(GAMMA))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix64(self.seed.wrapping_add(c.wrapping_mul(GAMMA)).wrapping_add(GAMMA))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via 128-bit multiply (unbiased enough for
    /// shuffling at desk scale, and exactly reproducible).
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices out of `0..n` (partial Fisher-Yates), `k <= n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
