//! Seedable random-bit supply.
//!
//! [`EntropySource`] is a counter-based generator: raw word `i` is a
//! splitmix64 finalisation of `key + (i + 1) * GAMMA`, so any word can be
//! recomputed from `(seed, i)` alone. A pluggable [`Corrector`] stage sits
//! between the raw words and the emitted bits.

mod selftest;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;

pub use selftest::{
    block_frequency_test, evaluate_bits, monobit_test, run_self_tests, runs_test, TestOutcome,
    TestReport, ALPHA, MIN_TEST_BITS,
};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("self-tests need at least {min} bits, got {got}")]
    InsufficientBits { got: usize, min: usize },
    #[error("bias must lie in (0, 1), got {0}")]
    InvalidBias(f64),
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed, e.g. one per endpoint or per block.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(GAMMA)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Corrector {
    #[default]
    None,
    /// Pairs `01 -> 0`, `10 -> 1`, equal pairs dropped.
    VonNeumann,
    /// One output bit per input pair: `a ^ b`.
    XorPairs,
}

/// Anything that hands out bits one at a time.
pub trait BitSource {
    fn next_bit(&mut self) -> bool;
}

#[derive(Debug, Clone)]
pub struct EntropySource {
    seed: u64,
    key: u64,
    corrector: Corrector,
    raw_bias: Option<f64>,
    counter: u64,
    raw_buf: u64,
    raw_left: u32,
    bits_emitted: u64,
}

impl EntropySource {
    pub fn new(seed: u64) -> Self {
        Self::with_corrector(seed, Corrector::None)
    }

    pub fn with_corrector(seed: u64, corrector: Corrector) -> Self {
        Self {
            seed,
            key: splitmix64(seed),
            corrector,
            raw_bias: None,
            counter: 0,
            raw_buf: 0,
            raw_left: 0,
            bits_emitted: 0,
        }
    }

    /// A source whose raw stage emits Bernoulli(`p`) bits instead of fair
    /// ones, for exercising the correctors.
    pub fn biased(seed: u64, p: f64, corrector: Corrector) -> Result<Self, EntropyError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(EntropyError::InvalidBias(p));
        }
        let mut src = Self::with_corrector(seed, corrector);
        src.raw_bias = Some(p);
        Ok(src)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn corrector(&self) -> Corrector {
        self.corrector
    }

    pub fn bits_emitted(&self) -> u64 {
        self.bits_emitted
    }

    /// Raw word `index` of the stream seeded by `seed`.
    #[inline]
    pub fn word_at(seed: u64, index: u64) -> u64 {
        splitmix64(splitmix64(seed).wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    #[inline]
    fn next_raw_word(&mut self) -> u64 {
        let w = splitmix64(
            self.key
                .wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GAMMA)),
        );
        self.counter += 1;
        w
    }

    #[inline]
    fn next_raw_bit(&mut self) -> bool {
        if let Some(p) = self.raw_bias {
            let u = (self.next_raw_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            return u < p;
        }
        if self.raw_left == 0 {
            self.raw_buf = self.next_raw_word();
            self.raw_left = 64;
        }
        let b = self.raw_buf & 1 == 1;
        self.raw_buf >>= 1;
        self.raw_left -= 1;
        b
    }

    /// Takes `n <= 64` bits, first drawn bit in the least significant position.
    #[inline]
    pub fn take_bits(&mut self, n: u32) -> u64 {
        debug_assert!(n <= 64);
        if n == 0 {
            return 0;
        }
        if self.corrector == Corrector::None && self.raw_bias.is_none() {
            self.bits_emitted += n as u64;
            if self.raw_left >= n {
                let v = if n == 64 { self.raw_buf } else { self.raw_buf & ((1u64 << n) - 1) };
                self.raw_buf = if n == 64 { 0 } else { self.raw_buf >> n };
                self.raw_left -= n;
                return v;
            }
            let have = self.raw_left;
            let low = self.raw_buf;
            let w = self.next_raw_word();
            let need = n - have;
            let high = if need == 64 { w } else { w & ((1u64 << need) - 1) };
            self.raw_buf = if need == 64 { 0 } else { w >> need };
            self.raw_left = 64 - need;
            return if have == 0 { high } else { low | (high << have) };
        }
        let mut v = 0u64;
        for i in 0..n {
            if self.next_bit() {
                v |= 1 << i;
            }
        }
        v
    }

    pub fn next_bits(&mut self, count: usize) -> BitString {
        let mut out = BitString::with_capacity(count);
        let mut left = count;
        while left > 0 {
            let n = left.min(64) as u32;
            let v = self.take_bits(n);
            for i in 0..n {
                out.push((v >> i) & 1 == 1);
            }
            left -= n as usize;
        }
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.take_bits(64) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`, bias-free via rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let v = self.take_bits(64);
            if v <= zone {
                return v % bound;
            }
        }
    }

    pub fn sample_pulse_class(&mut self) -> PulseClass {
        sample_pulse_class(self)
    }

    pub fn sample_polarization(&mut self) -> Polarization {
        sample_polarization(self)
    }
}

impl BitSource for EntropySource {
    fn next_bit(&mut self) -> bool {
        let b = match self.corrector {
            Corrector::None => self.next_raw_bit(),
            Corrector::VonNeumann => loop {
                let a = self.next_raw_bit();
                let b = self.next_raw_bit();
                if a != b {
                    break a;
                }
            },
            Corrector::XorPairs => self.next_raw_bit() ^ self.next_raw_bit(),
        };
        self.bits_emitted += 1;
        b
    }
}

impl RngCore for EntropySource {
    fn next_u32(&mut self) -> u32 {
        self.take_bits(32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.take_bits(64)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for b in dst {
            *b = self.take_bits(8) as u8;
        }
    }
}

/// Replays a fixed bit sequence, then zeros.
#[derive(Debug, Clone)]
pub struct FixedBits<I>(pub I);

impl<I: Iterator<Item = bool>> BitSource for FixedBits<I> {
    fn next_bit(&mut self) -> bool {
        self.0.next().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    /// H/V
    Rect,
    /// P/N (diagonal)
    Diag,
}

impl Basis {
    pub fn from_bit(b: bool) -> Self {
        if b {
            Basis::Diag
        } else {
            Basis::Rect
        }
    }

    pub fn bit(self) -> bool {
        self == Basis::Diag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PulseClass {
    Signal,
    Decoy,
    Vacuum,
}

impl PulseClass {
    pub const ALL: [PulseClass; 3] = [PulseClass::Signal, PulseClass::Decoy, PulseClass::Vacuum];

    /// 3-bit code, first drawn bit most significant: `000..=101` signal,
    /// `110` decoy, `111` vacuum. Gives the 6:1:1 mix exactly.
    pub fn from_code(code: u8) -> Self {
        match code & 0b111 {
            0b110 => PulseClass::Decoy,
            0b111 => PulseClass::Vacuum,
            _ => PulseClass::Signal,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
    P,
    N,
}

impl Polarization {
    pub const ALL: [Polarization; 4] = [Polarization::H, Polarization::V, Polarization::P, Polarization::N];

    /// `00 -> H, 01 -> V, 10 -> P, 11 -> N`, first drawn bit most significant.
    pub fn from_code(code: u8) -> Self {
        Self::ALL[(code & 0b11) as usize]
    }

    pub fn from_basis_bit(basis: Basis, bit: bool) -> Self {
        Self::from_code(((basis.bit() as u8) << 1) | bit as u8)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn basis(self) -> Basis {
        Basis::from_bit(self.code() & 0b10 != 0)
    }

    /// H=0, V=1, P=0, N=1.
    pub fn bit(self) -> bool {
        self.code() & 1 == 1
    }
}

pub fn sample_pulse_class<S: BitSource + ?Sized>(src: &mut S) -> PulseClass {
    let mut code = 0u8;
    for _ in 0..3 {
        code = (code << 1) | src.next_bit() as u8;
    }
    PulseClass::from_code(code)
}

pub fn sample_polarization<S: BitSource + ?Sized>(src: &mut S) -> Polarization {
    let hi = src.next_bit() as u8;
    let lo = src.next_bit() as u8;
    Polarization::from_code((hi << 1) | lo)
}

/// Alice's per-slot truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PulseDescriptor {
    pub class: PulseClass,
    pub polarization: Polarization,
    pub slot_index: u64,
}

impl PulseDescriptor {
    /// Alice's 4-bit coding word: class in the high two bits, polarization in the low two.
    pub fn coding_word(&self) -> u8 {
        ((self.class.index() as u8) << 2) | self.polarization.code()
    }

    pub fn from_coding_word(word: u8, slot_index: u64) -> Option<Self> {
        Some(Self {
            class: PulseClass::from_index((word >> 2) & 0b11)?,
            polarization: Polarization::from_code(word & 0b11),
            slot_index,
        })
    }

    pub fn basis(&self) -> Basis {
        self.polarization.basis()
    }

    pub fn bit(&self) -> bool {
        self.polarization.bit()
    }
}

/// Random-access view of Alice's emitted descriptors.
pub trait PulseLookup {
    /// `None` when the slot was never emitted.
    fn descriptor(&self, slot: u64) -> Option<PulseDescriptor>;
}

impl PulseLookup for [PulseDescriptor] {
    fn descriptor(&self, slot: u64) -> Option<PulseDescriptor> {
        self.binary_search_by_key(&slot, |d| d.slot_index)
            .ok()
            .map(|i| self[i])
    }
}

impl PulseLookup for Vec<PulseDescriptor> {
    fn descriptor(&self, slot: u64) -> Option<PulseDescriptor> {
        self.as_slice().descriptor(slot)
    }
}

/// Alice's pulse train in a bit-sliced, random-access layout.
///
/// Slots are grouped 64 at a time. Group `g` owns raw words `5g..5g+5`:
/// words 0-2 hold the three class-code bits of each lane (word 0 most
/// significant), words 3-4 the two polarization bits. The per-slot mapping is
/// the same as [`sample_pulse_class`] and [`sample_polarization`].
#[derive(Debug, Clone)]
pub struct PulseTrain {
    seed: u64,
    /// Slots at or past this bound were never emitted.
    limit: Option<u64>,
}

impl PulseTrain {
    pub fn new(seed: u64) -> Self {
        Self { seed, limit: None }
    }

    pub fn with_limit(seed: u64, limit: u64) -> Self {
        Self { seed, limit: Some(limit) }
    }

    #[inline]
    fn group_words(&self, group: u64) -> [u64; 5] {
        let base = group * 5;
        std::array::from_fn(|i| EntropySource::word_at(self.seed, base + i as u64))
    }

    #[inline]
    pub fn class_at(&self, slot: u64) -> PulseClass {
        let (g, lane) = (slot / 64, slot % 64);
        let base = g * 5;
        let hi = (EntropySource::word_at(self.seed, base) >> lane) & 1;
        let mid = (EntropySource::word_at(self.seed, base + 1) >> lane) & 1;
        if hi & mid == 0 {
            return PulseClass::Signal;
        }
        let lo = (EntropySource::word_at(self.seed, base + 2) >> lane) & 1;
        PulseClass::from_code(((hi << 2) | (mid << 1) | lo) as u8)
    }

    #[inline]
    pub fn at(&self, slot: u64) -> PulseDescriptor {
        let w = self.group_words(slot / 64);
        let lane = slot % 64;
        let bit = |i: usize| ((w[i] >> lane) & 1) as u8;
        PulseDescriptor {
            class: PulseClass::from_code((bit(0) << 2) | (bit(1) << 1) | bit(2)),
            polarization: Polarization::from_code((bit(3) << 1) | bit(4)),
            slot_index: slot,
        }
    }

    /// Emissions per class (signal, decoy, vacuum) over `slots`.
    pub fn class_counts(&self, slots: std::ops::Range<u64>) -> [u64; 3] {
        let mut counts = [0u64; 3];
        if slots.start >= slots.end {
            return counts;
        }
        let total = slots.end - slots.start;
        let (first, last) = (slots.start / 64, (slots.end - 1) / 64);
        for g in first..=last {
            let mut mask = u64::MAX;
            if g == first {
                mask &= u64::MAX << (slots.start % 64);
            }
            if g == last {
                let end = slots.end - g * 64;
                if end < 64 {
                    mask &= (1u64 << end) - 1;
                }
            }
            let base = g * 5;
            let hi = EntropySource::word_at(self.seed, base);
            let mid = EntropySource::word_at(self.seed, base + 1);
            let both = hi & mid & mask;
            if both == 0 {
                continue;
            }
            let lo = EntropySource::word_at(self.seed, base + 2);
            counts[1] += (both & !lo).count_ones() as u64;
            counts[2] += (both & lo).count_ones() as u64;
        }
        counts[0] = total - counts[1] - counts[2];
        counts
    }
}

impl PulseLookup for PulseTrain {
    fn descriptor(&self, slot: u64) -> Option<PulseDescriptor> {
        match self.limit {
            Some(l) if slot >= l => None,
            _ => Some(self.at(slot)),
        }
    }
}
