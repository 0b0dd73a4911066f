//! Benes permutation fabric and grouped key material.
//!
//! A Benes network on m = 2^t lanes has 2t-1 stages of m/2 two-input
//! switches. We use the flat conditional-swap layout: stage s (0-based)
//! pairs lane x with lane x ^ stride(s) where
//!
//! ```text
//! stride(s) = 2^min(s, 2t-2-s)        strides: 1, 2, ..., m/2, ..., 2, 1
//! ```
//!
//! Outer stages swap adjacent lanes; the middle stages act independently on
//! the even and odd sublattices, which are the two half-size subnetworks of
//! the classic recursive decomposition, so the layout is outer-first /
//! inner / outer-last. A switch bit of 0 passes both lanes through, 1 swaps
//! them; the all-zero bitstring is the identity.
//!
//! For m = 4 the three stages look like:
//!
//! ```text
//! lane 0 --[s0]-----[s1]-----[s2]-- lane 0     stage 0: pairs (0,1) (2,3)
//! lane 1 --[s0]--+--[s1]--+--[s2]-- lane 1     stage 1: pairs (0,2) (1,3)
//! lane 2 --[s0]--+--[s1]--+--[s2]-- lane 2     stage 2: pairs (0,1) (2,3)
//! lane 3 --[s0]-----[s1]-----[s2]-- lane 3
//! ```
//!
//! Routing uses the standard looping algorithm: inputs sharing an outer
//! switch must enter different subnetworks, outputs sharing an outer switch
//! must leave different subnetworks, and the union of those constraints is
//! 2-colored by walking each cycle, starting every loop from the
//! lowest-numbered unrouted terminal with the even subnetwork.
//!
//! Control bits are ordered stage-major, switch index ascending within a
//! stage (switches sorted by their lower lane). Grouped keys concatenate the
//! per-group bitstrings group-major. Key files use the `LLAK` container;
//! header field m = 0 marks negation-scheme keys (one bit per lane) instead
//! of fabric control bits.

use crate::error::{Error, Result};
use crate::linalg::is_permutation;
use crate::rng::{Seed, SplitMix64};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Benes network topology on a power-of-two lane count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenesFabric {
    m: usize,
}

impl BenesFabric {
    /// m must be a power of two >= 2.
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 || !m.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "fabric size must be a power of two >= 2, got {m}"
            )));
        }
        Ok(BenesFabric { m })
    }

    pub fn lanes(&self) -> usize {
        self.m
    }

    pub fn stages(&self) -> usize {
        2 * self.m.trailing_zeros() as usize - 1
    }

    pub fn switches_per_stage(&self) -> usize {
        self.m / 2
    }

    pub fn control_bits(&self) -> usize {
        self.stages() * self.switches_per_stage()
    }

    fn stride(&self, stage: usize) -> usize {
        1 << stage.min(self.stages() - 1 - stage)
    }

    /// Control bits that realize `out[pi[i]] = in[i]`.
    pub fn route(&self, pi: &[usize]) -> Result<Vec<bool>> {
        if pi.len() != self.m {
            return Err(Error::Shape(format!(
                "permutation over {} lanes routed on a {}-lane fabric",
                pi.len(),
                self.m
            )));
        }
        if !is_permutation(pi) {
            return Err(Error::Input(format!("not a permutation: {pi:?}")));
        }
        let stages = route_rec(pi);
        Ok(stages.concat())
    }

    /// Push `lanes` through the network under `bits`. Value-type agnostic:
    /// the fabric only moves lane contents around.
    pub fn eval<T: Clone>(&self, bits: &[bool], lanes: &[T]) -> Result<Vec<T>> {
        if lanes.len() != self.m {
            return Err(Error::Shape(format!(
                "{} lanes fed to a {}-lane fabric",
                lanes.len(),
                self.m
            )));
        }
        let mut out = lanes.to_vec();
        self.eval_in_place(bits, &mut out)?;
        Ok(out)
    }

    pub fn eval_in_place<T>(&self, bits: &[bool], lanes: &mut [T]) -> Result<()> {
        if lanes.len() != self.m {
            return Err(Error::Shape(format!(
                "{} lanes fed to a {}-lane fabric",
                lanes.len(),
                self.m
            )));
        }
        if bits.len() != self.control_bits() {
            return Err(Error::Input(format!(
                "{} control bits supplied, fabric takes {}",
                bits.len(),
                self.control_bits()
            )));
        }
        let mut idx = 0;
        for stage in 0..self.stages() {
            let s = self.stride(stage);
            for x in 0..self.m {
                if x & s != 0 {
                    continue;
                }
                if bits[idx] {
                    lanes.swap(x, x + s);
                }
                idx += 1;
            }
        }
        Ok(())
    }

    /// The permutation a bitstring realizes (evaluated on identity lanes).
    pub fn permutation_of(&self, bits: &[bool]) -> Result<Vec<usize>> {
        let routed = self.eval(bits, &(0..self.m).collect::<Vec<_>>())?;
        // routed[j] = i means lane i landed at j, i.e. pi[i] = j.
        let mut pi = vec![0usize; self.m];
        for (j, &i) in routed.iter().enumerate() {
            pi[i] = j;
        }
        Ok(pi)
    }
}

/// Looping 2-coloring for one recursion level. Returns per-stage bit vectors
/// in flat stage order for the whole network.
fn route_rec(pi: &[usize]) -> Vec<Vec<bool>> {
    let m = pi.len();
    if m == 2 {
        return vec![vec![pi[0] == 1]];
    }
    let mut inv = vec![0usize; m];
    for (i, &p) in pi.iter().enumerate() {
        inv[p] = i;
    }

    // subnet[i]: 0 = even sublattice, 1 = odd. Walk each constraint cycle,
    // alternating output-pair and input-pair edges.
    const UNSET: u8 = 2;
    let mut subnet = vec![UNSET; m];
    for start in 0..m {
        if subnet[start] != UNSET {
            continue;
        }
        subnet[start] = 0;
        let mut cur = start;
        loop {
            let buddy = inv[pi[cur] ^ 1];
            if subnet[buddy] != UNSET {
                debug_assert_ne!(subnet[buddy], subnet[cur], "odd constraint cycle");
                break;
            }
            subnet[buddy] = 1 - subnet[cur];
            let next = buddy ^ 1;
            if subnet[next] != UNSET {
                debug_assert_ne!(subnet[next], subnet[buddy], "odd constraint cycle");
                break;
            }
            subnet[next] = 1 - subnet[buddy];
            cur = next;
        }
    }

    let half = m / 2;
    let mut first = vec![false; half];
    let mut last = vec![false; half];
    let mut pi_even = vec![0usize; half];
    let mut pi_odd = vec![0usize; half];
    for k in 0..half {
        // Input pair (2k, 2k+1): the subnet-0 member must sit on the even wire.
        first[k] = subnet[2 * k] == 1;
        let even_in = if first[k] { 2 * k + 1 } else { 2 * k };
        let odd_in = even_in ^ 1;
        pi_even[k] = pi[even_in] >> 1;
        pi_odd[k] = pi[odd_in] >> 1;
        // Output pair (2k, 2k+1): swap when the value bound for output 2k
        // arrives on the odd wire.
        last[k] = subnet[inv[2 * k]] == 1;
    }

    let sub_even = route_rec(&pi_even);
    let sub_odd = route_rec(&pi_odd);
    let mut stages = Vec::with_capacity(sub_even.len() + 2);
    stages.push(first);
    for (se, so) in sub_even.into_iter().zip(sub_odd) {
        // Even sublattice switch k sits at lanes (2x, ..), odd at (2x+1, ..):
        // ascending lower-lane order interleaves them.
        let mut merged = Vec::with_capacity(se.len() * 2);
        for (e, o) in se.into_iter().zip(so) {
            merged.push(e);
            merged.push(o);
        }
        stages.push(merged);
    }
    stages.push(last);
    stages
}

/// Group-local key: control bits for n/m independent fabrics plus the
/// generating permutation. The permutation never leaves the process; only
/// [`KeyBits`] is serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedKey {
    pub n: usize,
    pub m: usize,
    pub pi: Vec<usize>,
    pub bits: Vec<bool>,
}

impl GroupedKey {
    pub fn total_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn bits_per_lane(&self) -> f64 {
        self.bits.len() as f64 / self.n as f64
    }

    pub fn key_bits(&self) -> KeyBits {
        KeyBits { n: self.n, m: self.m, bits: self.bits.clone() }
    }
}

/// Number of control bits for n lanes in groups of m: n * (2*log2(m) - 1) / 2,
/// zero for the degenerate one-lane groups.
pub fn control_bits_for(n: usize, m: usize) -> usize {
    if m == 1 {
        0
    } else {
        n / m * (2 * m.trailing_zeros() as usize - 1) * (m / 2)
    }
}

/// Route a group-local permutation over n lanes into per-group control bits.
/// `pi` must map every lane into its own group of m consecutive lanes; m = 1
/// is allowed only for the identity (no bits).
pub fn key_material(pi: &[usize], m: usize) -> Result<GroupedKey> {
    let n = pi.len();
    if n == 0 || m == 0 || n % m != 0 {
        return Err(Error::Input(format!(
            "group size {m} does not divide lane count {n}"
        )));
    }
    if !is_permutation(pi) {
        return Err(Error::Input(format!("not a permutation: {pi:?}")));
    }
    for (i, &p) in pi.iter().enumerate() {
        if i / m != p / m {
            return Err(Error::Input(format!(
                "lane {i} maps to {p}, crossing its group of {m}"
            )));
        }
    }
    if m == 1 {
        return Ok(GroupedKey { n, m, pi: pi.to_vec(), bits: Vec::new() });
    }
    let fabric = BenesFabric::new(m)?;
    let mut bits = Vec::with_capacity(control_bits_for(n, m));
    for g in 0..n / m {
        let local: Vec<usize> = (0..m).map(|j| pi[g * m + j] - g * m).collect();
        bits.extend(fabric.route(&local)?);
    }
    Ok(GroupedKey { n, m, pi: pi.to_vec(), bits })
}

/// Uniform random group-local permutation: independent Fisher-Yates shuffle
/// inside each group of m consecutive lanes.
pub fn random_group_local_permutation(n: usize, m: usize, seed: Seed) -> Result<Vec<usize>> {
    if n == 0 || m == 0 || n % m != 0 {
        return Err(Error::Input(format!(
            "group size {m} does not divide lane count {n}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut pi = Vec::with_capacity(n);
    for g in 0..n / m {
        let mut local: Vec<usize> = (g * m..(g + 1) * m).collect();
        rng.shuffle(&mut local);
        pi.extend(local);
    }
    Ok(pi)
}

/// Serialized key: lane count, group size, and packed control bits. m >= 2
/// means fabric control bits; m = 0 marks a negation-scheme key with one bit
/// per lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBits {
    pub n: usize,
    pub m: usize,
    pub bits: Vec<bool>,
}

impl KeyBits {
    pub fn expected_bits(n: usize, m: usize) -> usize {
        if m == 0 {
            n
        } else {
            control_bits_for(n, m)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m > 1 && (self.n % self.m != 0 || !self.m.is_power_of_two()) {
            return Err(Error::Input(format!(
                "group size {} invalid for {} lanes",
                self.m, self.n
            )));
        }
        let want = Self::expected_bits(self.n, self.m);
        if self.bits.len() != want {
            return Err(Error::Input(format!(
                "key holds {} bits, layout needs {want}",
                self.bits.len()
            )));
        }
        Ok(())
    }

    /// Apply the keyed permutation to the first n lanes in place; lanes past
    /// n are untouched. Only valid for fabric keys (m >= 1).
    pub fn apply_lanes<T>(&self, lanes: &mut [T]) -> Result<()> {
        self.validate()?;
        if self.m == 0 {
            return Err(Error::Input("negation key applied as a permutation".into()));
        }
        if lanes.len() < self.n {
            return Err(Error::Shape(format!(
                "{} lanes, key spans {}",
                lanes.len(),
                self.n
            )));
        }
        if self.m == 1 {
            return Ok(());
        }
        let fabric = BenesFabric::new(self.m)?;
        let per = fabric.control_bits();
        for g in 0..self.n / self.m {
            let bits = &self.bits[g * per..(g + 1) * per];
            fabric.eval_in_place(bits, &mut lanes[g * self.m..(g + 1) * self.m])?;
        }
        Ok(())
    }

    /// Full permutation over n lanes realized by the control bits.
    pub fn permutation(&self) -> Result<Vec<usize>> {
        let mut lanes: Vec<usize> = (0..self.n).collect();
        self.apply_lanes(&mut lanes)?;
        let mut pi = vec![0usize; self.n];
        for (j, &i) in lanes.iter().enumerate() {
            pi[i] = j;
        }
        Ok(pi)
    }
}

const KEY_MAGIC: &[u8; 4] = b"LLAK";
const KEY_VERSION: u32 = 1;

/// Pack bits LSB-first: bit k lives in byte k/8 at position k%8.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, &b) in bits.iter().enumerate() {
        if b {
            out[k / 8] |= 1 << (k % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

/// Write a key container: magic, u32 LE version, u32 LE n, u32 LE m, packed
/// bits (LSB of byte 0 is bit 0).
pub fn save_key(path: &Path, key: &KeyBits) -> Result<()> {
    key.validate()?;
    let mut f = fs::File::create(path)?;
    f.write_all(KEY_MAGIC)?;
    f.write_all(&KEY_VERSION.to_le_bytes())?;
    f.write_all(&(key.n as u32).to_le_bytes())?;
    f.write_all(&(key.m as u32).to_le_bytes())?;
    f.write_all(&pack_bits(&key.bits))?;
    Ok(())
}

pub fn load_key(path: &Path) -> Result<KeyBits> {
    let raw = fs::read(path)?;
    if raw.len() < 16 {
        return Err(Error::Format("key file shorter than its header".into()));
    }
    if &raw[0..4] != KEY_MAGIC {
        return Err(Error::Format("bad key magic".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != KEY_VERSION {
        return Err(Error::Format(format!("unsupported key version {version}")));
    }
    let n = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(raw[12..16].try_into().unwrap()) as usize;
    let count = KeyBits::expected_bits(n, m);
    let want_len = 16 + count.div_ceil(8);
    if raw.len() != want_len {
        return Err(Error::Format(format!(
            "key file is {} bytes, layout needs {want_len}",
            raw.len()
        )));
    }
    let key = KeyBits { n, m, bits: unpack_bits(&raw[16..], count) };
    key.validate()?;
    Ok(key)
}
