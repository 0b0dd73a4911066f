//! Pinned pseudo-random stream.
//!
//! Every random choice in this crate (weights, probe tokens, sign diagonals,
//! key permutations, attack populations) is drawn from splitmix64 so that two
//! independent implementations produce bit-identical artifacts from the same
//! seed. The derived samplers below (unit floats, Gaussians via Box-Muller,
//! bounded integers via modulo, Fisher-Yates shuffles) are part of that
//! contract: they use only integer splitmix64 outputs and IEEE-754 f64
//! arithmetic, nothing platform- or library-dependent.

use serde::{Deserialize, Serialize};

/// Seed for a [`SplitMix64`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Derive an independent sub-stream seed. `stream` tags the consumer
/// (weights, probes, key, ...); equal `(seed, stream)` pairs always yield the
/// same sub-seed, and the parent stream itself is never reused.
pub fn derive_seed(seed: Seed, stream: u64) -> Seed {
    let mut r = SplitMix64::new(Seed(seed.0.wrapping_add(stream.wrapping_mul(GAMMA))));
    Seed(r.next_u64())
}

/// splitmix64 generator (Steele, Lea, Flood 2014). State advances by the
/// 64-bit golden-ratio constant; output is the finalizer of the new state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: Seed) -> Self {
        SplitMix64 { state: seed.0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform f64 in [0, 1): top 53 bits of the next output.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in (0, 1]; never zero, safe under `ln`.
    pub fn next_open_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// +1.0 or -1.0 with equal probability (low bit of the next output;
    /// set bit means -1).
    pub fn next_sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal via Box-Muller. Consumes exactly two outputs per
    /// sample; the sine branch is discarded so the stream layout stays flat.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). Plain modulo: the bias at desk-scale n is
    /// immeasurable and the mapping is trivially portable.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        self.next_u64() % n
    }

    /// Fisher-Yates shuffle, descending index order.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// Stream tags for [`derive_seed`]. Consumers combine a tag with local
/// indices (block number, tensor role, individual id) by chaining derives.
pub mod streams {
    pub const WEIGHTS: u64 = 1;
    pub const PROBES: u64 = 2;
    pub const HADAMARD: u64 = 3;
    pub const KEY_PERM: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const VERIFY: u64 = 6;
    pub const CORPUS: u64 = 7;
}
