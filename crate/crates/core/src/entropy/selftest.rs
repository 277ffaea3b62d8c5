//! A small subset of the NIST SP 800-22 battery: frequency (monobit),
//! frequency within a block, and runs.

use bitvec::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;

use super::{BitSource, EntropyError};
use crate::bits::BitString;

pub const ALPHA: f64 = 0.01;
pub const MIN_TEST_BITS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestOutcome {
    pub name: &'static str,
    pub statistic: f64,
    pub p_value: f64,
    pub passed: bool,
}

impl TestOutcome {
    fn new(name: &'static str, statistic: f64, p_value: f64) -> Self {
        Self { name, statistic, p_value, passed: p_value >= ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub n_bits: usize,
    pub alpha: f64,
    pub monobit: TestOutcome,
    pub block_frequency: TestOutcome,
    pub runs: TestOutcome,
    pub all_passed: bool,
}

pub fn monobit_test(bits: &BitSlice<u64, Lsb0>) -> TestOutcome {
    let n = bits.len() as f64;
    let s = 2.0 * bits.count_ones() as f64 - n;
    let s_obs = s.abs() / n.sqrt();
    TestOutcome::new("monobit", s_obs, erfc(s_obs / std::f64::consts::SQRT_2))
}

/// `block_len` bits per block; trailing bits that do not fill a block are ignored.
pub fn block_frequency_test(bits: &BitSlice<u64, Lsb0>, block_len: usize) -> TestOutcome {
    let blocks = bits.len() / block_len;
    let chi2 = 4.0
        * block_len as f64
        * bits
            .chunks_exact(block_len)
            .map(|b| {
                let pi = b.count_ones() as f64 / block_len as f64;
                (pi - 0.5).powi(2)
            })
            .sum::<f64>();
    TestOutcome::new("block_frequency", chi2, gamma_ur(blocks as f64 / 2.0, chi2 / 2.0))
}

pub fn runs_test(bits: &BitSlice<u64, Lsb0>) -> TestOutcome {
    let n = bits.len() as f64;
    let pi = bits.count_ones() as f64 / n;
    // frequency prerequisite
    if (pi - 0.5).abs() >= 2.0 / n.sqrt() {
        return TestOutcome::new("runs", f64::NAN, 0.0);
    }
    let v = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let v = v as f64;
    let num = (v - 2.0 * n * pi * (1.0 - pi)).abs();
    let den = 2.0 * (2.0 * n).sqrt() * pi * (1.0 - pi);
    TestOutcome::new("runs", v, erfc(num / den))
}

/// Runs all three tests on an existing bit string.
pub fn evaluate_bits(bits: &BitSlice<u64, Lsb0>) -> Result<TestReport, EntropyError> {
    if bits.len() < MIN_TEST_BITS {
        return Err(EntropyError::InsufficientBits { got: bits.len(), min: MIN_TEST_BITS });
    }
    // fewer than 100 blocks, each at least 1% of the input
    let block_len = bits.len().div_ceil(99).max(20);
    let monobit = monobit_test(bits);
    let block_frequency = block_frequency_test(bits, block_len);
    let runs = runs_test(bits);
    let all_passed = monobit.passed && block_frequency.passed && runs.passed;
    Ok(TestReport { n_bits: bits.len(), alpha: ALPHA, monobit, block_frequency, runs, all_passed })
}

/// Draws `n_bits` from `source` and tests them.
pub fn run_self_tests<S: BitSource + ?Sized>(
    source: &mut S,
    n_bits: usize,
) -> Result<TestReport, EntropyError> {
    if n_bits < MIN_TEST_BITS {
        return Err(EntropyError::InsufficientBits { got: n_bits, min: MIN_TEST_BITS });
    }
    let bits: BitString = (0..n_bits).map(|_| source.next_bit()).collect();
    evaluate_bits(&bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::from_bools;
    use crate::entropy::{Corrector, EntropySource, FixedBits};

    fn parse(s: &str) -> BitString {
        from_bools(s.bytes().map(|c| c == b'1'))
    }

    // Worked examples from the SP 800-22 test descriptions; p-values
    // cross-checked with scipy's erfc / gammaincc.
    #[test]
    fn reference_examples() {
        let m = monobit_test(&parse("1011010101"));
        assert!((m.p_value - 0.527089).abs() < 1e-6, "{m:?}");
        let b = block_frequency_test(&parse("0110011010"), 3);
        assert!((b.p_value - 0.801252).abs() < 1e-6, "{b:?}");
        let r = runs_test(&parse("1001101011"));
        assert!((r.p_value - 0.147232).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn alternating_stream_fails_runs() {
        let mut src = FixedBits((0..).map(|i| i % 2 == 1));
        let rep = run_self_tests(&mut src, 100_000).unwrap();
        assert!(!rep.runs.passed);
        assert!(rep.monobit.passed);
    }

    #[test]
    fn all_zero_stream_fails_monobit() {
        let mut src = FixedBits(std::iter::repeat(false));
        let rep = run_self_tests(&mut src, 20_000).unwrap();
        assert!(!rep.monobit.passed);
        assert!(!rep.all_passed);
    }

    #[test]
    fn default_source_passes() {
        let mut src = EntropySource::new(1);
        let rep = run_self_tests(&mut src, 1_000_000).unwrap();
        assert!(rep.all_passed, "{rep:?}");
    }

    #[test]
    fn corrected_biased_source_passes() {
        let mut src = EntropySource::biased(8, 0.35, Corrector::VonNeumann).unwrap();
        assert!(run_self_tests(&mut src, 100_000).unwrap().all_passed);
        let mut raw = EntropySource::biased(8, 0.35, Corrector::None).unwrap();
        assert!(!run_self_tests(&mut raw, 100_000).unwrap().monobit.passed);
    }

    #[test]
    fn too_few_bits_is_an_error() {
        let mut src = EntropySource::new(1);
        assert_eq!(
            run_self_tests(&mut src, 9_999),
            Err(EntropyError::InsufficientBits { got: 9_999, min: MIN_TEST_BITS })
        );
    }
}
