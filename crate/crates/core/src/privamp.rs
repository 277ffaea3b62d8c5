//! Privacy amplification: Toeplitz hashing over GF(2) and the decoy-state
//! secure fraction (SFactor) that sizes the output.
//!
//! The `m x n` matrix is packed into `n + m - 1` bits with
//! `T[i][j] = diag[i - j + n - 1]`: `diag[0..n]` is the first row read right
//! to left, `diag[n-1..]` the first column read top to bottom.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{self, BitString};
use crate::entropy::{EntropySource, PulseClass};
use crate::reconcile::binary_entropy;
use crate::sifting::{ClassStats, SiftStats};

/// Decoy detections needed before the bound is trusted.
pub const MIN_DECOY_DETECTIONS: u64 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum PrivampError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("only {0} decoy detections, need {MIN_DECOY_DETECTIONS}")]
    InsufficientStatistics(u64),
    #[error("invalid SFactor input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSpec {
    pub n: usize,
    pub m: usize,
    pub diag: BitString,
}

impl ToeplitzSpec {
    pub fn new(n: usize, m: usize, diag: BitString) -> Result<Self, PrivampError> {
        if n == 0 || m == 0 || diag.len() != n + m - 1 {
            return Err(PrivampError::DimensionMismatch(format!(
                "diag has {} bits, n={n} m={m} needs n+m-1",
                diag.len()
            )));
        }
        Ok(Self { n, m, diag })
    }

    /// Matrix drawn from the entropy source seeded with `seed`.
    pub fn random(n: usize, m: usize, seed: u64) -> Result<Self, PrivampError> {
        if n == 0 || m == 0 {
            return Err(PrivampError::DimensionMismatch("empty matrix".into()));
        }
        Self::new(n, m, EntropySource::new(seed).next_bits(n + m - 1))
    }

    pub fn element(&self, i: usize, j: usize) -> bool {
        self.diag[i + self.n - 1 - j]
    }

    fn check_key(&self, key: &BitString) -> Result<(), PrivampError> {
        if key.len() != self.n {
            return Err(PrivampError::DimensionMismatch(format!("key has {} bits, expected {}", key.len(), self.n)));
        }
        Ok(())
    }
}

/// Words of `bits` followed by a zero guard word.
fn padded_words(bits: &BitString) -> Vec<u64> {
    let mut w = bits::words(bits);
    w.push(0);
    w
}

/// `len <= 64` bits of `words` starting at bit `start`, little-end first.
#[inline]
fn window(words: &[u64], start: usize, len: usize) -> u64 {
    let (q, sh) = (start / 64, start % 64);
    let lo = words.get(q).copied().unwrap_or(0) >> sh;
    let hi = if sh == 0 { 0 } else { words.get(q + 1).copied().unwrap_or(0) << (64 - sh) };
    let v = lo | hi;
    if len >= 64 { v } else { v & ((1u64 << len) - 1) }
}

/// `y = T * key`, 64 output rows at a time.
///
/// With `r = n - 1 - j`, row `i` sums `diag[i + r]` over the set key bits, so
/// output word `w` collects the diag window at `64 w + r`. Keeping 64 copies
/// of diag pre-shifted by `r % 64` turns each set bit into one aligned XOR
/// sweep over the output.
pub fn toeplitz_hash(key: &BitString, spec: &ToeplitzSpec) -> Result<BitString, PrivampError> {
    spec.check_key(key)?;
    let (n, m) = (spec.n, spec.m);
    let out_words = m.div_ceil(64);
    if out_words == 0 {
        return Ok(BitString::new());
    }
    let diag = padded_words(&spec.diag);
    let stride = (n - 1) / 64 + out_words + 1;
    let mut shifted = vec![0u64; 64 * stride];
    for (s, row) in shifted.chunks_exact_mut(stride).enumerate() {
        for (k, w) in row.iter_mut().enumerate() {
            *w = window(&diag, 64 * k + s, 64);
        }
    }
    let mut out = vec![0u64; out_words];
    for j in key.iter_ones() {
        let r = n - 1 - j;
        let base = (r % 64) * stride + r / 64;
        for (o, x) in out.iter_mut().zip(&shifted[base..base + out_words]) {
            *o ^= x;
        }
    }
    Ok(bits::from_words(&out, m))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedOutput {
    pub bits: BitString,
    pub block_ops: u64,
}

/// `T * key` by `b x b` sub-blocks: each block multiplies a `b`-bit slice of
/// the key into `b` partial output bits. Edge blocks are zero-padded.
pub fn blocked_multiply(key: &BitString, spec: &ToeplitzSpec, block: usize) -> Result<BlockedOutput, PrivampError> {
    spec.check_key(key)?;
    if block == 0 {
        return Err(PrivampError::DimensionMismatch("block size must be positive".into()));
    }
    let (n, m) = (spec.n, spec.m);
    // reversed diag: row i over columns j.. is the window of rev at m-1-i+j
    let rev: BitString = spec.diag.iter().by_vals().rev().collect();
    let rev = padded_words(&rev);
    let key_w = padded_words(key);
    let mut y = BitString::repeat(false, m);
    let mut ops = 0u64;
    for i0 in (0..m).step_by(block) {
        let rows = block.min(m - i0);
        for j0 in (0..n).step_by(block) {
            let cols = block.min(n - j0);
            ops += 1;
            for i in i0..i0 + rows {
                let mut parity = 0u32;
                let mut c = 0;
                while c < cols {
                    let len = (cols - c).min(64);
                    let row = window(&rev, m - 1 - i + j0 + c, len);
                    parity ^= (row & window(&key_w, j0 + c, len)).count_ones();
                    c += len;
                }
                if parity & 1 == 1 {
                    let v = y[i];
                    y.set(i, !v);
                }
            }
        }
    }
    Ok(BlockedOutput { bits: y, block_ops: ops })
}

/// `floor(n * sfactor)`; zero means the block yields no key.
pub fn final_key_length(n: usize, sfactor: f64) -> usize {
    (n as f64 * sfactor.clamp(0.0, 1.0)).floor() as usize
}

/// How reconciliation leakage is charged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EcLeakage {
    /// `f * H2(E_signal)` per bit.
    Efficiency(f64),
    /// Exactly the disclosed bits over the corrected length.
    Measured { leaked_bits: u64, n: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SFactorInput {
    pub mu: f64,
    pub nu: f64,
    pub signal: ClassStats,
    pub decoy: ClassStats,
    pub vacuum: ClassStats,
    /// Statistical fluctuation allowance in standard deviations.
    pub confidence_sigmas: f64,
    pub leakage: EcLeakage,
}

impl SFactorInput {
    pub fn from_stats(stats: &SiftStats, mu: f64, nu: f64, confidence_sigmas: f64, leakage: EcLeakage) -> Self {
        Self {
            mu,
            nu,
            signal: *stats.class(PulseClass::Signal),
            decoy: *stats.class(PulseClass::Decoy),
            vacuum: *stats.class(PulseClass::Vacuum),
            confidence_sigmas,
            leakage,
        }
    }
}

fn rate(c: &ClassStats) -> f64 {
    if c.emitted == 0 { 0.0 } else { c.detected as f64 / c.emitted as f64 }
}

fn error_rate(c: &ClassStats) -> f64 {
    if c.compared == 0 { 0.0 } else { c.errors as f64 / c.compared as f64 }
}

/// Count-based gain shifted by `k` standard deviations of the count.
fn gain_shifted(c: &ClassStats, k: f64) -> f64 {
    if c.emitted == 0 {
        return 0.0;
    }
    let d = c.detected as f64;
    ((d + k * d.max(1.0).sqrt()) / c.emitted as f64).max(0.0)
}

/// Breakdown of the decoy-state bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SFactorDetail {
    pub y1_lower: f64,
    pub e1_upper: f64,
    pub q1: f64,
    pub leak_fraction: f64,
    pub sfactor: f64,
}

/// Two-intensity decoy bound (weak decoy + vacuum) on the secure fraction of
/// corrected signal bits:
///
/// ```text
/// Y1 >= mu / (mu nu - nu^2) * (Qnu e^nu - Qmu e^mu nu^2/mu^2 - (mu^2 - nu^2)/mu^2 Y0)
/// e1 <= (Enu Qnu e^nu - Y0 / 2) / (Y1 nu)
/// Q1  = Y1 mu e^-mu
/// S   = Q1/Qmu (1 - H2(e1)) - leak
/// ```
///
/// Gains and error counts are first pushed toward the pessimistic side by
/// `confidence_sigmas` standard deviations.
pub fn sfactor_detail(inp: &SFactorInput) -> Result<SFactorDetail, PrivampError> {
    let bad = |s: &str| Err(PrivampError::InvalidInput(s.to_string()));
    let (mu, nu) = (inp.mu, inp.nu);
    if !(mu > nu && nu > 0.0) {
        return bad("need mu > nu > 0");
    }
    if inp.decoy.detected < MIN_DECOY_DETECTIONS {
        return Err(PrivampError::InsufficientStatistics(inp.decoy.detected));
    }
    let (q_mu, q_nu) = (rate(&inp.signal), rate(&inp.decoy));
    if !(q_mu > 0.0 && q_mu < 1.0 && q_nu > 0.0 && q_nu < 1.0) {
        return bad("gains must lie in (0, 1)");
    }
    let (e_mu, e_nu) = (error_rate(&inp.signal), error_rate(&inp.decoy));
    if e_mu > 0.5 || e_nu > 0.5 {
        return bad("error rates must lie in [0, 0.5]");
    }
    let k = inp.confidence_sigmas;
    let q_nu_l = gain_shifted(&inp.decoy, -k);
    let q_nu_u = gain_shifted(&inp.decoy, k);
    let q_mu_u = gain_shifted(&inp.signal, k);
    let y0_u = gain_shifted(&inp.vacuum, k);
    let y0_l = gain_shifted(&inp.vacuum, -k);
    let e_nu_u = if inp.decoy.compared == 0 {
        e_nu
    } else {
        let n = inp.decoy.compared as f64;
        (e_nu + k * (e_nu * (1.0 - e_nu) / n).sqrt()).min(0.5)
    };

    let y1 = mu / (mu * nu - nu * nu)
        * (q_nu_l * nu.exp() - q_mu_u * mu.exp() * nu * nu / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * y0_u);
    let leak_fraction = match inp.leakage {
        EcLeakage::Efficiency(f) => f * binary_entropy(e_mu),
        EcLeakage::Measured { leaked_bits, n } => {
            if n == 0 {
                return bad("measured leakage over zero bits");
            }
            leaked_bits as f64 / n as f64
        }
    };
    if y1 <= 0.0 {
        return Ok(SFactorDetail { y1_lower: y1.max(0.0), e1_upper: 0.5, q1: 0.0, leak_fraction, sfactor: 0.0 });
    }
    let e1 = ((e_nu_u * q_nu_u * nu.exp() - 0.5 * y0_l) / (y1 * nu)).clamp(0.0, 0.5);
    let q1 = y1 * mu * (-mu).exp();
    let s = (q1 / q_mu * (1.0 - binary_entropy(e1)) - leak_fraction).clamp(0.0, 1.0);
    Ok(SFactorDetail { y1_lower: y1, e1_upper: e1, q1, leak_fraction, sfactor: s })
}

pub fn compute_sfactor(inp: &SFactorInput) -> Result<f64, PrivampError> {
    sfactor_detail(inp).map(|d| d.sfactor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonics::{expected_click_prob, OpticalConfig};

    fn naive(key: &BitString, spec: &ToeplitzSpec) -> BitString {
        (0..spec.m)
            .map(|i| (0..spec.n).fold(false, |acc, j| acc ^ (spec.element(i, j) & key[j])))
            .collect()
    }

    #[test]
    fn element_rule_is_toeplitz() {
        let spec = ToeplitzSpec::random(37, 23, 1).unwrap();
        for i in 0..22 {
            for j in 0..36 {
                assert_eq!(spec.element(i, j), spec.element(i + 1, j + 1));
            }
        }
        assert_eq!(spec.element(0, 36), spec.diag[0]);
        assert_eq!(spec.element(22, 0), spec.diag[37 + 23 - 2]);
    }

    #[test]
    fn hand_multiplied_example() {
        let spec = ToeplitzSpec::new(2, 2, bits::from_bools([true, false, true])).unwrap();
        assert!(!spec.element(0, 0) && spec.element(0, 1) && spec.element(1, 0) && !spec.element(1, 1));
        let key = bits::from_bools([true, false]);
        assert_eq!(toeplitz_hash(&key, &spec).unwrap(), bits::from_bools([false, true]));
        for b in [1, 2, 3] {
            assert_eq!(blocked_multiply(&key, &spec, b).unwrap().bits, bits::from_bools([false, true]));
        }
    }

    #[test]
    fn zero_key_hashes_to_zero() {
        let spec = ToeplitzSpec::random(500, 100, 3).unwrap();
        let out = toeplitz_hash(&BitString::repeat(false, 500), &spec).unwrap();
        assert_eq!(out, BitString::repeat(false, 100));
    }

    #[test]
    fn fast_and_blocked_match_naive() {
        let mut rng = EntropySource::new(4);
        for (n, m) in [(1024, 307), (1, 1), (64, 64), (65, 63), (200, 1)] {
            let spec = ToeplitzSpec::random(n, m, n as u64 * 31 + m as u64).unwrap();
            let key = rng.next_bits(n);
            let expect = naive(&key, &spec);
            assert_eq!(toeplitz_hash(&key, &spec).unwrap(), expect);
            for b in [1, 2, 7, 40, 64, 100] {
                let out = blocked_multiply(&key, &spec, b).unwrap();
                assert_eq!(out.bits, expect, "n={n} m={m} b={b}");
                assert_eq!(out.block_ops, (m.div_ceil(b) * n.div_ceil(b)) as u64);
            }
        }
    }

    #[test]
    fn two_by_two_blocks_on_four_by_four() {
        let spec = ToeplitzSpec::new(4, 4, bits::from_bools([true, false, true, true, false, false, true])).unwrap();
        for k in 0u8..16 {
            let key = bits::from_bools((0..4).map(|i| (k >> i) & 1 == 1));
            let out = blocked_multiply(&key, &spec, 2).unwrap();
            assert_eq!(out.block_ops, 4);
            assert_eq!(out.bits, naive(&key, &spec));
        }
    }

    #[test]
    fn dimension_errors() {
        assert!(ToeplitzSpec::new(4, 4, BitString::repeat(false, 6)).is_err());
        let spec = ToeplitzSpec::random(10, 5, 1).unwrap();
        assert!(toeplitz_hash(&BitString::repeat(false, 9), &spec).is_err());
        assert!(blocked_multiply(&BitString::repeat(false, 10), &spec, 0).is_err());
    }

    #[test]
    fn small_output_collision_rate() {
        // distinct inputs collide with probability 2^-m over random matrices
        let (n, m, trials) = (64, 8, 40_000);
        let mut rng = EntropySource::new(11);
        let mut hits = 0;
        for t in 0..trials {
            let spec = ToeplitzSpec::random(n, m, 1000 + t).unwrap();
            let a = rng.next_bits(n);
            let mut b = rng.next_bits(n);
            if a == b {
                let v = b[0];
                b.set(0, !v);
            }
            hits += (toeplitz_hash(&a, &spec).unwrap() == toeplitz_hash(&b, &spec).unwrap()) as u32;
        }
        let p = 1.0 / 256.0;
        let expect = p * trials as f64;
        assert!((hits as f64) < expect + 4.0 * (expect * (1.0 - p)).sqrt(), "{hits}");
    }

    #[test]
    fn key_length_examples() {
        assert_eq!(final_key_length(262_144, 0.3), 78_643);
        assert_eq!(final_key_length(262_144, 0.0), 0);
        assert_eq!(final_key_length(262_144, 1.0), 262_144);
    }

    fn class(emitted: u64, gain: f64, compared_frac: f64, err: f64) -> ClassStats {
        let detected = (emitted as f64 * gain).round() as u64;
        let compared = (detected as f64 * compared_frac).round() as u64;
        ClassStats { emitted, detected, compared, errors: (compared as f64 * err).round() as u64 }
    }

    /// Emissions behind one 262144-bit unit at the default operating point.
    fn operating_point(e_signal: f64, e_decoy: f64, cfg: &OpticalConfig) -> SFactorInput {
        let pulses = 262_144.0 / (0.5 * 0.9 * 0.75 * expected_click_prob(cfg, PulseClass::Signal));
        let p = pulses as u64;
        SFactorInput {
            mu: 0.6,
            nu: 0.2,
            signal: class(p * 6 / 8, expected_click_prob(cfg, PulseClass::Signal), 0.05, e_signal),
            decoy: class(p / 8, expected_click_prob(cfg, PulseClass::Decoy), 0.5, e_decoy),
            vacuum: class(p / 8, expected_click_prob(cfg, PulseClass::Vacuum), 0.5, 0.5),
            confidence_sigmas: 10.0,
            leakage: EcLeakage::Efficiency(1.5),
        }
    }

    #[test]
    fn noiseless_bound_is_single_photon_fraction() {
        let cfg = OpticalConfig { dark_count_per_gate: 0.0, ..Default::default() };
        let mut inp = operating_point(0.0, 0.0, &cfg);
        inp.confidence_sigmas = 0.0;
        let eta = cfg.transmittance();
        let (mu, nu) = (0.6f64, 0.2f64);
        let (qmu, qnu) = (rate(&inp.signal), rate(&inp.decoy));
        let y1 = mu / (mu * nu - nu * nu) * (qnu * nu.exp() - qmu * mu.exp() * nu * nu / (mu * mu));
        let expect = y1 * mu * (-mu).exp() / qmu;
        let s = compute_sfactor(&inp).unwrap();
        assert!(s > 0.0);
        assert!((s - expect).abs() < 1e-12);
        // close to the true single-photon share mu e^-mu eta / (1 - e^-eta mu)
        let truth = mu * (-mu).exp() * eta / (1.0 - (-eta * mu).exp());
        assert!(s <= truth + 1e-3 && s > 0.9 * truth, "{s} vs {truth}");
    }

    #[test]
    fn decreases_with_error_rate_to_zero() {
        let cfg = OpticalConfig::default();
        let mut last = f64::INFINITY;
        let mut hit_zero = false;
        for k in 0..=30 {
            let e = k as f64 * 0.005;
            let s = compute_sfactor(&operating_point(e, e, &cfg)).unwrap();
            assert!(s <= last + 1e-15, "e={e}");
            last = s;
            hit_zero |= s == 0.0;
        }
        assert!(hit_zero);
        // signal error alone, decoy fixed
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let s = compute_sfactor(&operating_point(k as f64 * 0.005, 0.01, &cfg)).unwrap();
            assert!(s <= last + 1e-15);
            last = s;
        }
    }

    #[test]
    fn operating_point_near_reference_value() {
        let s = compute_sfactor(&operating_point(0.01, 0.012, &OpticalConfig::default())).unwrap();
        assert!((s - 0.3).abs() <= 0.15, "{s}");
    }

    #[test]
    fn measured_leakage_replaces_efficiency_term() {
        let cfg = OpticalConfig::default();
        let mut inp = operating_point(0.01, 0.01, &cfg);
        let base = sfactor_detail(&inp).unwrap();
        inp.leakage = EcLeakage::Measured { leaked_bits: 20_000, n: 200_000 };
        let d = sfactor_detail(&inp).unwrap();
        assert!((d.leak_fraction - 0.1).abs() < 1e-15);
        assert!((d.sfactor - (base.sfactor + base.leak_fraction - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn too_few_decoys_rejected() {
        let cfg = OpticalConfig::default();
        let mut inp = operating_point(0.01, 0.01, &cfg);
        inp.decoy.detected = 9_999;
        assert_eq!(compute_sfactor(&inp), Err(PrivampError::InsufficientStatistics(9_999)));
        let mut inp = operating_point(0.01, 0.01, &cfg);
        inp.nu = 0.7;
        assert!(matches!(compute_sfactor(&inp), Err(PrivampError::InvalidInput(_))));
    }
}
