//! Counter-based random streams.
//!
//! Every random decision in the pipeline draws from a [`Stream`] whose key is
//! derived from the run seed plus a path of stable identifiers (case hash, op
//! index, step...). The `n`-th output of a stream is a pure function of
//! `(key, n)`, so streams are independent of evaluation order and trivially
//! reproducible from another language:
//!
//! ```text
//! mix(z)   = splitmix64 finalizer
//! out(n)   = mix(key + (n + 1) * 0x9E3779B97F4A7C15)
//! uniform  = (out >> 11) * 2^-53
//! normal   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)      (two uniforms per draw)
//! derive(seed, [p0, p1, ..]) = fold(mix(seed), |k, p| mix(k ^ mix(p)))
//! ```

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable FNV-1a hash used for case ids and modality names.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a stream key from a seed and a path of identifiers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |k, p| mix64(k ^ mix64(*p)))
}

/// Stream ids for the fixed set of random consumers.
pub mod tag {
    pub const BIAS_FIELD: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CONTRAST: u64 = 3;
    pub const FLIP: u64 = 4;
    pub const AFFINE: u64 = 5;
    pub const MASK: u64 = 10;
    pub const INIT: u64 = 20;
    pub const SHUFFLE: u64 = 30;
    pub const AUGMENT: u64 = 31;
    pub const SYNTH: u64 = 40;
    pub const EMBED: u64 = 50;
    pub const GRADCHECK: u64 = 60;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn derived(seed: u64, path: &[u64]) -> Self {
        Self::new(derive(seed, path))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Box-Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard normal truncated to `[-2, 2]` by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// First `k` entries of a uniform random permutation of `0..n`.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
