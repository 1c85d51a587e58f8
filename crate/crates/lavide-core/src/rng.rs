//! Self-contained deterministic randomness.
//!
//! All stochastic behaviour in the crate (toy encoders, weight init, scene
//! generation) flows through [`SplitMix64`] so that a fixed seed reproduces
//! bit-identical results across runs and platforms. Token hashing uses
//! FNV-1a, which is trivial to re-implement in an external oracle script.

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

/// SplitMix64 stream generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream keyed by a (token hash, seed) pair.
    ///
    /// State is `hash + seed * GOLDEN` (wrapping); the oracle scripts mirror
    /// this exact combination.
    pub fn keyed(hash: u64, seed: u64) -> Self {
        Self::new(hash.wrapping_add(seed.wrapping_mul(GOLDEN)))
    }

    /// Stream tagged with a label, for independent substreams of one seed.
    pub fn tagged(tag: &str, seed: u64) -> Self {
        Self::keyed(fnv1a64(tag.as_bytes()), seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [-1, 1).
    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Modulo bias is irrelevant at our scales.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
