//! Winnow-style error reconciliation with Hamming syndromes.
//!
//! Per iteration both sides permute the key (from the second iteration on),
//! split it into segments of `2^k` bits and compare segment parities. For each
//! mismatched segment Alice reveals the `k`-bit syndrome (XOR of the indices
//! of set bits over positions `1..2^k`); Bob flips the bit at
//! `syndrome_A ^ syndrome_B`, or position 0 when the syndromes agree.
//! A final CRC-32 decides whether the block is kept.
//!
//! Message flow (Alice holds the reference key):
//!
//! ```text
//! Alice                       Bob
//!   PARITY_VEC   ------------>
//!               <------------  SYNDROME_REQ
//!   SYNDROME_RSP ------------>
//!   ... next PARITY_VEC or CRC_CHECK
//!               <------------  BLOCK_VERDICT
//! ```
//!
//! Iterations stop when the plan is exhausted, when the first iteration
//! shows no parity mismatch, or when a run of clean iterations makes it
//! unlikely (below [`RESIDUAL_MISS`]) that an undetected error pair survived.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{self, BitString};
use crate::entropy::{derive_seed, EntropySource};

#[derive(Debug, Error, PartialEq)]
pub enum ReconcileError {
    #[error("CRC mismatch after {0} iterations; block discarded")]
    CrcMismatch(usize),
    #[error("key lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid reconcile config: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("qber outside (0, 0.5)")]
    DomainError,
    #[error("classical channel closed")]
    ChannelClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconcileConfig {
    /// Segment length per iteration when `adaptive` is off.
    pub schedule: Vec<u32>,
    pub max_iterations: usize,
    pub permutation_seed_base: u64,
    /// Choose segment lengths from the QBER estimate and observed mismatches.
    pub adaptive: bool,
}

impl Default for ReconcileConfig {
    fn default() -> Self {
        Self {
            schedule: vec![8, 8, 16, 16, 32, 64, 128],
            max_iterations: 7,
            permutation_seed_base: 0x5EED_0F_C0FFEE,
            adaptive: true,
        }
    }
}

fn check_schedule(s: &[u32]) -> Result<(), ReconcileError> {
    if s.is_empty() {
        return Err(ReconcileError::InvalidConfig("empty schedule".into()));
    }
    if let Some(bad) = s.iter().find(|&&l| !l.is_power_of_two() || l < 8) {
        return Err(ReconcileError::InvalidConfig(format!("segment length {bad} is not 2^k with k >= 3")));
    }
    Ok(())
}

impl ReconcileConfig {
    pub fn fixed(schedule: Vec<u32>) -> Self {
        Self { max_iterations: schedule.len(), schedule, adaptive: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ReconcileError> {
        check_schedule(&self.schedule)?;
        if self.schedule.len() != self.max_iterations {
            return Err(ReconcileError::InvalidConfig("schedule length must equal max_iterations".into()));
        }
        Ok(())
    }

    /// Segment plan both sides use for a block with estimated error rate `qber`.
    pub fn plan(&self, qber: f64) -> Plan {
        if self.adaptive {
            Plan::adaptive(qber)
        } else {
            Plan::Fixed(self.schedule.clone())
        }
    }
}

/// Bound on the chance that an error pair hides through the trailing run of
/// clean iterations before the loop may stop early.
pub const RESIDUAL_MISS: f64 = 1.0 / (1u64 << 20) as f64;

pub const ADAPTIVE_TARGET: f64 = 0.2;

/// How segment lengths are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Fixed(Vec<u32>),
    /// Each segment length is the largest power of two with
    /// `len * e <= target`, where `e` is the error rate still expected in the
    /// key: the QBER estimate at first, later inferred from the fraction of
    /// mismatched segments.
    Adaptive { qber: f64, target: f64, max_iterations: usize },
}

impl Plan {
    pub fn adaptive(qber: f64) -> Self {
        Plan::Adaptive { qber, target: ADAPTIVE_TARGET, max_iterations: 40 }
    }

    fn validate(&self) -> Result<(), ReconcileError> {
        match self {
            Plan::Fixed(s) => check_schedule(s),
            Plan::Adaptive { qber, target, max_iterations } => {
                if !(*qber >= 0.0 && *qber < 0.5 && *target > 0.0 && *max_iterations > 0) {
                    return Err(ReconcileError::InvalidConfig("adaptive plan parameters".into()));
                }
                Ok(())
            }
        }
    }

    fn max_iterations(&self) -> usize {
        match self {
            Plan::Fixed(s) => s.len(),
            Plan::Adaptive { max_iterations, .. } => *max_iterations,
        }
    }
}

fn length_for(rate: f64, target: f64, n: usize) -> usize {
    let cap = (n / 4).next_power_of_two().max(8);
    if rate <= 0.0 {
        return cap;
    }
    let raw = (target / rate).max(8.0);
    (1usize << (raw.log2().floor() as u32)).clamp(8, cap)
}

pub fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 0.0;
    }
    -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
}

/// `leaked / (n * H2(qber))`.
pub fn efficiency(leaked_bits: u64, n: usize, qber: f64) -> Result<f64, ReconcileError> {
    if !(qber > 0.0 && qber < 0.5) || n == 0 {
        return Err(ReconcileError::DomainError);
    }
    Ok(leaked_bits as f64 / (n as f64 * binary_entropy(qber)))
}

/// One parity per `seg_len` bits, the final segment zero-padded.
pub fn parity_vector(key: &BitString, seg_len: usize) -> BitString {
    bits::from_bools(key.chunks(seg_len).map(|c| c.count_ones() % 2 == 1))
}

/// XOR of the indices of set bits at positions `1..segment.len()`.
pub fn hamming_syndrome(segment: &[u8]) -> u32 {
    segment
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &b)| b != 0)
        .fold(0, |acc, (i, _)| acc ^ i as u32)
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    shuffle(&mut p, seed);
    p
}

fn shuffle(p: &mut [u32], seed: u64) {
    let mut rng = EntropySource::new(seed);
    for i in (1..p.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        p.swap(i, j);
    }
}

/// `out[i] = key[perm[i]]`.
pub fn permute(key: &BitString, perm: &[u32]) -> BitString {
    bits::from_bools(perm.iter().map(|&i| key[i as usize]))
}

pub fn unpermute(key: &BitString, perm: &[u32]) -> BitString {
    let mut out = BitString::repeat(false, key.len());
    for (i, &p) in perm.iter().enumerate() {
        out.set(p as usize, key[i]);
    }
    out
}

pub fn crc32(bits: &BitString) -> u32 {
    let mut bytes = bits::to_bytes(bits);
    bytes.extend_from_slice(&(bits.len() as u64).to_be_bytes());
    crc32fast::hash(&bytes)
}

fn iteration_seed(base: u64, block_id: u64, iteration: usize) -> u64 {
    derive_seed(derive_seed(base, block_id), iteration as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityVec {
    pub block_id: u64,
    pub iteration: u16,
    pub seg_len: u32,
    pub parities: BitString,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyndromeReq {
    pub block_id: u64,
    pub iteration: u16,
    pub segments: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyndromeRsp {
    pub block_id: u64,
    pub iteration: u16,
    pub bits_per_syndrome: u8,
    pub syndromes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrcCheck {
    pub block_id: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockVerdict {
    pub block_id: u64,
    pub ok: bool,
}

/// What Alice sends after answering a syndrome request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AliceNext {
    Parity(ParityVec),
    Crc(CrcCheck),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciledKeyBlock {
    pub block_id: u64,
    pub bits: BitString,
    pub leaked_bits: u64,
    pub iterations_used: usize,
    pub crc_ok: bool,
}

/// Shared per-block state: working key, current order and leakage tally.
#[derive(Debug, Clone)]
struct Core {
    block_id: u64,
    plan: Plan,
    seed_base: u64,
    key: Vec<u8>,
    order: Vec<u32>,
    iteration: usize,
    seg_len: usize,
    next_len: usize,
    miss: f64,
    leaked: u64,
}

impl Core {
    fn new(block_id: u64, key: &BitString, plan: Plan, seed_base: u64) -> Result<Self, ReconcileError> {
        plan.validate()?;
        let next_len = match &plan {
            Plan::Fixed(s) => s[0] as usize,
            Plan::Adaptive { qber, target, .. } => length_for(*qber, *target, key.len()),
        };
        Ok(Self {
            block_id,
            plan,
            seed_base,
            key: key.iter().map(|b| *b as u8).collect(),
            order: (0..key.len() as u32).collect(),
            iteration: 0,
            seg_len: 0,
            next_len,
            miss: 1.0,
            leaked: 0,
        })
    }

    /// Enters iteration `self.iteration`: permute and fix the segment length.
    fn begin(&mut self) {
        if self.iteration > 0 {
            shuffle(&mut self.order, iteration_seed(self.seed_base, self.block_id, self.iteration));
        }
        self.seg_len = self.next_len;
    }

    fn segments(&self) -> usize {
        self.key.len().div_ceil(self.seg_len)
    }

    fn segment(&self, j: usize) -> Vec<u8> {
        let mut seg = vec![0u8; self.seg_len];
        let lo = j * self.seg_len;
        let hi = (lo + self.seg_len).min(self.key.len());
        for (dst, &src) in seg.iter_mut().zip(&self.order[lo..hi]) {
            *dst = self.key[src as usize];
        }
        seg
    }

    fn parities(&self) -> BitString {
        let mut out = BitString::with_capacity(self.segments());
        for chunk in self.order.chunks(self.seg_len) {
            out.push(chunk.iter().fold(0u8, |a, &i| a ^ self.key[i as usize]) == 1);
        }
        out
    }

    fn syndrome_bits(&self) -> u8 {
        self.seg_len.trailing_zeros() as u8
    }

    /// Moves past an iteration with `mismatches` mismatched segments.
    /// Returns true when the loop is finished.
    fn advance(&mut self, mismatches: usize) -> bool {
        let n = self.key.len();
        let done = if mismatches == 0 {
            // chance that two given positions share a segment
            self.miss *= ((self.seg_len as f64 - 1.0) / (n as f64 - 1.0).max(1.0)).min(1.0);
            self.iteration == 0 || self.miss <= RESIDUAL_MISS
        } else {
            self.miss = 1.0;
            false
        };
        self.iteration += 1;
        self.next_len = match &self.plan {
            Plan::Fixed(s) => s.get(self.iteration).map_or(0, |&l| l as usize),
            Plan::Adaptive { target, .. } => {
                // invert P(odd error count) = (1 - exp(-2 lambda)) / 2 per segment
                let segs = self.segments() as f64;
                let odd = (mismatches as f64 / segs).min(0.499);
                let lambda = -0.5 * (1.0 - 2.0 * odd).ln();
                let left = (lambda * segs - mismatches as f64).max(0.0);
                length_for(left / n as f64, *target, n)
            }
        };
        done || self.iteration >= self.plan.max_iterations()
    }

    fn bits(&self) -> BitString {
        bits::from_bools(self.key.iter().map(|&b| b == 1))
    }

    fn check_iteration(&self, block_id: u64, iteration: u16) -> Result<(), ReconcileError> {
        if block_id != self.block_id || iteration as usize != self.iteration {
            return Err(ReconcileError::Protocol(format!(
                "expected block {} iteration {}, got block {block_id} iteration {iteration}",
                self.block_id, self.iteration
            )));
        }
        Ok(())
    }
}

pub struct AliceReconciler {
    core: Core,
    crc: Option<u32>,
}

impl AliceReconciler {
    pub fn new(block_id: u64, key: &BitString, plan: Plan, seed_base: u64) -> Result<Self, ReconcileError> {
        Ok(Self { core: Core::new(block_id, key, plan, seed_base)?, crc: None })
    }

    pub fn start(&mut self) -> ParityVec {
        self.parity_message()
    }

    fn parity_message(&mut self) -> ParityVec {
        self.core.begin();
        let parities = self.core.parities();
        self.core.leaked += parities.len() as u64;
        ParityVec {
            block_id: self.core.block_id,
            iteration: self.core.iteration as u16,
            seg_len: self.core.seg_len as u32,
            parities,
        }
    }

    pub fn on_request(&mut self, req: &SyndromeReq) -> Result<(SyndromeRsp, AliceNext), ReconcileError> {
        self.core.check_iteration(req.block_id, req.iteration)?;
        if self.crc.is_some() {
            return Err(ReconcileError::Protocol("request after CRC".into()));
        }
        let n_seg = self.core.segments();
        let mut syndromes = Vec::with_capacity(req.segments.len());
        for &j in &req.segments {
            if j as usize >= n_seg {
                return Err(ReconcileError::Protocol(format!("segment {j} out of range")));
            }
            syndromes.push(hamming_syndrome(&self.core.segment(j as usize)));
        }
        let k = self.core.syndrome_bits();
        self.core.leaked += k as u64 * syndromes.len() as u64;
        let rsp = SyndromeRsp { block_id: self.core.block_id, iteration: req.iteration, bits_per_syndrome: k, syndromes };
        let next = if self.core.advance(req.segments.len()) {
            let crc = crc32(&self.core.bits());
            self.crc = Some(crc);
            self.core.leaked += 32;
            AliceNext::Crc(CrcCheck { block_id: self.core.block_id, crc })
        } else {
            AliceNext::Parity(self.parity_message())
        };
        Ok((rsp, next))
    }

    pub fn on_verdict(self, v: &BlockVerdict) -> Result<ReconciledKeyBlock, ReconcileError> {
        if self.crc.is_none() || v.block_id != self.core.block_id {
            return Err(ReconcileError::Protocol("unexpected verdict".into()));
        }
        if !v.ok {
            return Err(ReconcileError::CrcMismatch(self.core.iteration));
        }
        Ok(ReconciledKeyBlock {
            block_id: self.core.block_id,
            bits: self.core.bits(),
            leaked_bits: self.core.leaked,
            iterations_used: self.core.iteration,
            crc_ok: true,
        })
    }

    pub fn leaked_bits(&self) -> u64 {
        self.core.leaked
    }
}

pub struct BobReconciler {
    core: Core,
    pending: Vec<u32>,
}

impl BobReconciler {
    /// `plan` must equal Alice's; each `PARITY_VEC` is checked against it.
    pub fn new(block_id: u64, key: &BitString, plan: Plan, seed_base: u64) -> Result<Self, ReconcileError> {
        Ok(Self { core: Core::new(block_id, key, plan, seed_base)?, pending: Vec::new() })
    }

    pub fn on_parity(&mut self, pv: &ParityVec) -> Result<SyndromeReq, ReconcileError> {
        self.core.check_iteration(pv.block_id, pv.iteration)?;
        if pv.seg_len as usize != self.core.next_len {
            return Err(ReconcileError::Protocol("segment length disagrees with plan".into()));
        }
        self.core.begin();
        let mine = self.core.parities();
        if mine.len() != pv.parities.len() {
            return Err(ReconcileError::Protocol("parity vector length".into()));
        }
        self.core.leaked += mine.len() as u64;
        self.pending = (0..mine.len()).filter(|&j| mine[j] != pv.parities[j]).map(|j| j as u32).collect();
        Ok(SyndromeReq { block_id: pv.block_id, iteration: pv.iteration, segments: self.pending.clone() })
    }

    pub fn on_response(&mut self, rsp: &SyndromeRsp) -> Result<(), ReconcileError> {
        self.core.check_iteration(rsp.block_id, rsp.iteration)?;
        if rsp.syndromes.len() != self.pending.len() || rsp.bits_per_syndrome != self.core.syndrome_bits() {
            return Err(ReconcileError::Protocol("syndrome response shape".into()));
        }
        self.core.leaked += rsp.bits_per_syndrome as u64 * rsp.syndromes.len() as u64;
        for (&j, &sa) in self.pending.iter().zip(&rsp.syndromes) {
            let sb = hamming_syndrome(&self.core.segment(j as usize));
            let pos = j as usize * self.core.seg_len + (sa ^ sb) as usize;
            // a multi-error segment can point into the zero padding
            if let Some(&idx) = self.core.order.get(pos) {
                self.core.key[idx as usize] ^= 1;
            }
        }
        let n = self.pending.len();
        self.pending.clear();
        self.core.advance(n);
        Ok(())
    }

    /// Bob's key as corrected so far.
    pub fn working_key(&self) -> BitString {
        self.core.bits()
    }

    pub fn on_crc(self, c: &CrcCheck) -> (BlockVerdict, Result<ReconciledKeyBlock, ReconcileError>) {
        let bits = self.core.bits();
        let ok = c.block_id == self.core.block_id && crc32(&bits) == c.crc;
        let verdict = BlockVerdict { block_id: self.core.block_id, ok };
        let res = if ok {
            Ok(ReconciledKeyBlock {
                block_id: self.core.block_id,
                bits,
                leaked_bits: self.core.leaked + 32,
                iterations_used: self.core.iteration,
                crc_ok: true,
            })
        } else {
            Err(ReconcileError::CrcMismatch(self.core.iteration))
        };
        (verdict, res)
    }
}

/// Payload codecs. All integers little-endian; bit strings MSB-first.
pub mod wire {
    use super::*;

    struct Reader<'a>(&'a [u8]);

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], ReconcileError> {
            if self.0.len() < n {
                return Err(ReconcileError::Protocol("truncated payload".into()));
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u8(&mut self) -> Result<u8, ReconcileError> {
            Ok(self.take(1)?[0])
        }
        fn u16(&mut self) -> Result<u16, ReconcileError> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }
        fn u32(&mut self) -> Result<u32, ReconcileError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64, ReconcileError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn finish(&self) -> Result<(), ReconcileError> {
            if self.0.is_empty() {
                Ok(())
            } else {
                Err(ReconcileError::Protocol("trailing bytes".into()))
            }
        }
    }

    pub fn encode_parity(m: &ParityVec) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + m.parities.len() / 8 + 1);
        out.extend_from_slice(&m.block_id.to_le_bytes());
        out.extend_from_slice(&m.iteration.to_le_bytes());
        out.extend_from_slice(&m.seg_len.to_le_bytes());
        out.extend_from_slice(&(m.parities.len() as u32).to_le_bytes());
        out.extend(bits::to_bytes(&m.parities));
        out
    }

    pub fn decode_parity(p: &[u8]) -> Result<ParityVec, ReconcileError> {
        let mut r = Reader(p);
        let (block_id, iteration, seg_len, n) = (r.u64()?, r.u16()?, r.u32()?, r.u32()? as usize);
        let parities = bits::from_bytes(r.take(n.div_ceil(8))?, n);
        r.finish()?;
        Ok(ParityVec { block_id, iteration, seg_len, parities })
    }

    pub fn encode_request(m: &SyndromeReq) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * m.segments.len());
        out.extend_from_slice(&m.block_id.to_le_bytes());
        out.extend_from_slice(&m.iteration.to_le_bytes());
        out.extend_from_slice(&(m.segments.len() as u32).to_le_bytes());
        for s in &m.segments {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn decode_request(p: &[u8]) -> Result<SyndromeReq, ReconcileError> {
        let mut r = Reader(p);
        let (block_id, iteration, n) = (r.u64()?, r.u16()?, r.u32()? as usize);
        let segments = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(SyndromeReq { block_id, iteration, segments })
    }

    /// Syndromes packed back to back, `bits_per_syndrome` bits each.
    pub fn encode_response(m: &SyndromeRsp) -> Vec<u8> {
        let k = m.bits_per_syndrome as usize;
        let mut packed = BitString::with_capacity(k * m.syndromes.len());
        for s in &m.syndromes {
            for b in (0..k).rev() {
                packed.push((s >> b) & 1 == 1);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(&m.block_id.to_le_bytes());
        out.extend_from_slice(&m.iteration.to_le_bytes());
        out.push(m.bits_per_syndrome);
        out.extend_from_slice(&(m.syndromes.len() as u32).to_le_bytes());
        out.extend(bits::to_bytes(&packed));
        out
    }

    pub fn decode_response(p: &[u8]) -> Result<SyndromeRsp, ReconcileError> {
        let mut r = Reader(p);
        let (block_id, iteration, k, n) = (r.u64()?, r.u16()?, r.u8()?, r.u32()? as usize);
        if k > 31 {
            return Err(ReconcileError::Protocol("syndrome width".into()));
        }
        let total = k as usize * n;
        let packed = bits::from_bytes(r.take(total.div_ceil(8))?, total);
        r.finish()?;
        let syndromes = packed
            .chunks(k.max(1) as usize)
            .take(n)
            .map(|c| c.iter().fold(0u32, |a, b| (a << 1) | *b as u32))
            .collect::<Vec<_>>();
        let syndromes = if k == 0 { vec![0; n] } else { syndromes };
        Ok(SyndromeRsp { block_id, iteration, bits_per_syndrome: k, syndromes })
    }

    pub fn encode_crc(m: &CrcCheck) -> Vec<u8> {
        let mut out = m.block_id.to_le_bytes().to_vec();
        out.extend_from_slice(&m.crc.to_le_bytes());
        out
    }

    pub fn decode_crc(p: &[u8]) -> Result<CrcCheck, ReconcileError> {
        let mut r = Reader(p);
        let m = CrcCheck { block_id: r.u64()?, crc: r.u32()? };
        r.finish()?;
        Ok(m)
    }

    pub fn encode_verdict(m: &BlockVerdict) -> Vec<u8> {
        let mut out = m.block_id.to_le_bytes().to_vec();
        out.push(m.ok as u8);
        out
    }

    pub fn decode_verdict(p: &[u8]) -> Result<BlockVerdict, ReconcileError> {
        let mut r = Reader(p);
        let m = BlockVerdict { block_id: r.u64()?, ok: r.u8()? != 0 };
        r.finish()?;
        Ok(m)
    }
}

/// One disclosure on the channel, for leakage audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disclosure {
    Parities(usize),
    Syndromes { count: usize, bits_each: u8 },
    Crc,
}

impl Disclosure {
    pub fn bits(&self) -> u64 {
        match self {
            Disclosure::Parities(n) => *n as u64,
            Disclosure::Syndromes { count, bits_each } => *count as u64 * *bits_each as u64,
            Disclosure::Crc => 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub alice: ReconciledKeyBlock,
    pub bob: ReconciledKeyBlock,
    /// Everything Alice put on the channel, decoded from the wire bytes.
    pub disclosures: Vec<Disclosure>,
}

/// Runs both parties in-process through the wire encodings.
pub fn reconcile_session(
    block_id: u64,
    key_a: &BitString,
    key_b: &BitString,
    cfg: &ReconcileConfig,
    qber_estimate: f64,
) -> Result<SessionOutcome, ReconcileError> {
    if key_a.len() != key_b.len() {
        return Err(ReconcileError::LengthMismatch(key_a.len(), key_b.len()));
    }
    run_plan(block_id, key_a, key_b, cfg.plan(qber_estimate), cfg.permutation_seed_base)
}

/// [`reconcile_session`] with an explicit segment plan.
pub fn run_plan(
    block_id: u64,
    key_a: &BitString,
    key_b: &BitString,
    plan: Plan,
    seed_base: u64,
) -> Result<SessionOutcome, ReconcileError> {
    if key_a.len() != key_b.len() {
        return Err(ReconcileError::LengthMismatch(key_a.len(), key_b.len()));
    }
    let mut alice = AliceReconciler::new(block_id, key_a, plan.clone(), seed_base)?;
    let mut bob = BobReconciler::new(block_id, key_b, plan, seed_base)?;
    let mut disclosures = Vec::new();

    let mut parity = wire::decode_parity(&wire::encode_parity(&alice.start()))?;
    let crc = loop {
        disclosures.push(Disclosure::Parities(parity.parities.len()));
        let req = wire::decode_request(&wire::encode_request(&bob.on_parity(&parity)?))?;
        let (rsp, next) = alice.on_request(&req)?;
        let rsp = wire::decode_response(&wire::encode_response(&rsp))?;
        disclosures.push(Disclosure::Syndromes { count: rsp.syndromes.len(), bits_each: rsp.bits_per_syndrome });
        bob.on_response(&rsp)?;
        match next {
            AliceNext::Parity(p) => parity = wire::decode_parity(&wire::encode_parity(&p))?,
            AliceNext::Crc(c) => break wire::decode_crc(&wire::encode_crc(&c))?,
        }
    };
    disclosures.push(Disclosure::Crc);
    let (verdict, bob_result) = bob.on_crc(&crc);
    let verdict = wire::decode_verdict(&wire::encode_verdict(&verdict))?;
    let alice_result = alice.on_verdict(&verdict);
    match (alice_result, bob_result) {
        (Ok(a), Ok(b)) => Ok(SessionOutcome { alice: a, bob: b, disclosures }),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}
