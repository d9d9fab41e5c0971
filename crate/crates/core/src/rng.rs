//! Counter-based random draws for DARE.
//!
//! Each draw is a pure function of (seed, task index, parameter key, flat
//! element index), so merged output does not depend on thread scheduling,
//! shard order, or which tensors were processed before.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Random stream for one (seed, task, key) triple, indexed by element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementStream {
    key: u64,
}

impl ElementStream {
    pub fn new(seed: u64, task: usize, param_key: &str) -> Self {
        let k = mix(seed ^ GOLDEN);
        let k = mix(k ^ (task as u64).wrapping_add(1).wrapping_mul(GOLDEN));
        let k = mix(k ^ fnv1a(param_key.as_bytes()));
        ElementStream { key: k }
    }

    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        mix(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli(p) draw: true means "drop".
    #[inline]
    pub fn bernoulli_at(&self, index: u64, p: f64) -> bool {
        self.uniform_at(index) < p
    }
}
