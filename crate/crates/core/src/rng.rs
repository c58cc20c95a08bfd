//! Deterministic random streams.
//!
//! Every stream is a xoshiro256** generator (Blackman & Vigna) whose 256-bit
//! state is filled by SplitMix64 from a 64-bit *lineage key*:
//!
//! * root: `key = mix64(seed)`
//! * fork: `key_child = mix64(key_parent ^ mix64(fnv1a64(label)))`
//!
//! where `mix64` is the SplitMix64 output finalizer and `fnv1a64` the 64-bit
//! FNV-1a hash. A child therefore depends only on the parent's lineage, never
//! on how far the parent has advanced, and forking leaves the parent
//! untouched. Floats are built from the top bits of `next_u64`, so draws are
//! bit-identical on every platform.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    s: [u64; 4],
    root: u64,
    key: u64,
    depth: u32,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(seed, mix64(seed), 0)
    }

    fn from_key(root: u64, key: u64, depth: u32) -> Self {
        let mut x = key;
        let mut s = [0u64; 4];
        for slot in &mut s {
            x = x.wrapping_add(GOLDEN_GAMMA);
            *slot = mix64(x);
        }
        // xoshiro is stuck at the all-zero state; SplitMix64 cannot emit four
        // zeros in a row, but keep the guard explicit.
        if s == [0; 4] {
            s[0] = GOLDEN_GAMMA;
        }
        RngStream {
            s,
            root,
            key,
            depth,
            draws: 0,
        }
    }

    /// Derives an independent child stream. The parent is not advanced.
    pub fn fork(&self, label: impl AsRef<[u8]>) -> Result<Self> {
        let label = label.as_ref();
        if label.is_empty() {
            return Err(Error::invalid("rng fork label must be non-empty"));
        }
        let key = mix64(self.key ^ mix64(fnv1a64(label)));
        Ok(Self::from_key(self.root, key, self.depth + 1))
    }

    /// `fork` for labels known to be non-empty at the call site.
    pub fn child(&self, label: &str) -> Self {
        self.fork(label).expect("static fork labels are non-empty")
    }

    /// Child labelled `"{label}:{index}"`.
    pub fn child_idx(&self, label: &str, index: u64) -> Self {
        self.child(&format!("{label}:{index}"))
    }

    pub fn root_seed(&self) -> u64 {
        self.root
    }

    pub fn lineage_key(&self) -> u64 {
        self.key
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Number of 64-bit words drawn from this stream so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]` (returns `lo` when the range is degenerate).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * u
    }

    /// Uniform integer in `[0, n)`, unbiased (Lemire's multiply-shift with
    /// rejection). `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller (one output per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in sampled order.
    pub fn sample_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

/// Beta(1, 1) sample. Beta(1, 1) is exactly Uniform(0, 1), so this is a plain
/// uniform draw in `[0, 1)`.
pub fn beta_1_1(rng: &mut RngStream) -> f64 {
    rng.uniform()
}
