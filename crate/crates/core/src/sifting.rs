//! Three-step basis reconciliation.
//!
//! 1. Bob announces basis and location of every detection (`BASIS_LOC`).
//! 2. Alice answers with a 2-bit verdict per detection (`RETAIN`):
//!    `0` basis mismatch, otherwise `1 + class` for a matched pulse.
//! 3. Both sides disclose the sample bits (`SAMPLE_DISCLOSE`): every
//!    `stride`-th matched signal bit and every matched decoy/vacuum bit.
//!    The remaining matched signal bits form the sifted key.
//!
//! No message carries an undisclosed key bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{self, BitString};
use crate::entropy::{Basis, PulseClass, PulseLookup};
use crate::syncframe::{self, FrameFormat, Measurement, SyncError};

pub const DEFAULT_SAMPLE_STRIDE: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SiftError {
    #[error("Bob referenced slot {0} that Alice never emitted")]
    LocationUnknown(u64),
    #[error("malformed sifting message: {0}")]
    Malformed(String),
    #[error("no sampled bits")]
    EmptySample,
    #[error("frame error: {0}")]
    Frame(#[from] SyncError),
}

/// Alice's verdict on one announced detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    Discard,
    Keep(PulseClass),
}

impl Retain {
    fn code(self) -> u8 {
        match self {
            Retain::Discard => 0,
            Retain::Keep(c) => 1 + c.index() as u8,
        }
    }

    fn from_code(c: u8) -> Self {
        match c {
            0 => Retain::Discard,
            c => Retain::Keep(PulseClass::from_index(c - 1).expect("2-bit code")),
        }
    }
}

/// Step 1 payload: Bob's records in frame-stream form with bit values cleared.
pub fn encode_announcement(meas: &[Measurement], fmt: &FrameFormat) -> Vec<u8> {
    let blind: Vec<_> = meas.iter().map(|m| Measurement { bit: false, ..*m }).collect();
    syncframe::encode_stream(&syncframe::frames_from_events(&blind, fmt))
}

pub fn decode_announcement(payload: &[u8], fmt: &FrameFormat) -> Result<Vec<(u64, Basis)>, SiftError> {
    let frames = syncframe::decode_stream(payload)?;
    let mut out = Vec::new();
    for f in &frames {
        if f.records.iter().any(|r| r.bit || r.slot_in_frame as u32 >= fmt.k_signal_clocks) {
            return Err(SiftError::Malformed("announcement record carries a bit or bad slot".into()));
        }
        out.extend(f.decode(fmt).into_iter().map(|m| (m.slot_index, m.basis)));
    }
    if out.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(SiftError::Malformed("announcement not strictly increasing".into()));
    }
    Ok(out)
}

/// Step 2 at Alice. Also returns detections per class over all announced slots.
pub fn alice_retain<L: PulseLookup + ?Sized>(
    announced: &[(u64, Basis)],
    alice: &L,
) -> Result<(Vec<Retain>, [u64; 3]), SiftError> {
    let mut detected = [0u64; 3];
    let mut out = Vec::with_capacity(announced.len());
    for &(slot, basis) in announced {
        let d = alice.descriptor(slot).ok_or(SiftError::LocationUnknown(slot))?;
        detected[d.class.index()] += 1;
        out.push(if d.basis() == basis { Retain::Keep(d.class) } else { Retain::Discard });
    }
    Ok((out, detected))
}

/// Four verdicts per byte, first verdict in the top two bits.
pub fn encode_retain(verdicts: &[Retain]) -> Vec<u8> {
    let mut out = vec![0u8; verdicts.len().div_ceil(4)];
    for (i, v) in verdicts.iter().enumerate() {
        out[i / 4] |= v.code() << (6 - 2 * (i % 4));
    }
    out
}

pub fn decode_retain(payload: &[u8], count: usize) -> Result<Vec<Retain>, SiftError> {
    if payload.len() != count.div_ceil(4) {
        return Err(SiftError::Malformed(format!("retain payload {} bytes for {count} records", payload.len())));
    }
    Ok((0..count).map(|i| Retain::from_code((payload[i / 4] >> (6 - 2 * (i % 4))) & 3)).collect())
}

/// Where each retained detection goes, identical on both sides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    /// Indices (into the announcement) of sifted-key bits.
    pub key: Vec<usize>,
    /// Indices and classes of disclosed sample bits, in slot order.
    pub disclosed: Vec<(usize, PulseClass)>,
}

pub fn partition(verdicts: &[Retain], stride: usize) -> Partition {
    let mut p = Partition::default();
    let mut signal_seen = 0usize;
    for (i, v) in verdicts.iter().enumerate() {
        match v {
            Retain::Discard => {}
            Retain::Keep(PulseClass::Signal) => {
                if signal_seen % stride == 0 {
                    p.disclosed.push((i, PulseClass::Signal));
                } else {
                    p.key.push(i);
                }
                signal_seen += 1;
            }
            Retain::Keep(c) => p.disclosed.push((i, *c)),
        }
    }
    p
}

impl Partition {
    pub fn disclosure(&self, own_bits: &[bool]) -> BitString {
        bits::from_bools(self.disclosed.iter().map(|&(i, _)| own_bits[i]))
    }

    pub fn key_bits(&self, own_bits: &[bool]) -> BitString {
        bits::from_bools(self.key.iter().map(|&i| own_bits[i]))
    }

    pub fn key_slots(&self, announced: &[(u64, Basis)]) -> Vec<u64> {
        self.key.iter().map(|&i| announced[i].0).collect()
    }

    /// Accumulates per-class comparisons of the two disclosures into `stats`.
    pub fn compare(&self, mine: &BitString, theirs: &BitString, stats: &mut SiftStats) -> Result<(), SiftError> {
        if mine.len() != self.disclosed.len() || theirs.len() != self.disclosed.len() {
            return Err(SiftError::Malformed("disclosure length mismatch".into()));
        }
        for (k, &(_, class)) in self.disclosed.iter().enumerate() {
            let c = &mut stats.classes[class.index()];
            c.compared += 1;
            c.errors += (mine[k] != theirs[k]) as u64;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub emitted: u64,
    pub detected: u64,
    pub compared: u64,
    pub errors: u64,
}

/// Per-class tallies, indexed signal / decoy / vacuum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftStats {
    pub classes: [ClassStats; 3],
}

impl SiftStats {
    pub fn class(&self, c: PulseClass) -> &ClassStats {
        &self.classes[c.index()]
    }

    pub fn merge(&mut self, other: &SiftStats) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.emitted += b.emitted;
            a.detected += b.detected;
            a.compared += b.compared;
            a.errors += b.errors;
        }
    }

    pub fn gain(&self, c: PulseClass) -> Option<f64> {
        let s = self.class(c);
        (s.emitted > 0).then(|| s.detected as f64 / s.emitted as f64)
    }

    pub fn error_rate(&self, c: PulseClass) -> Option<f64> {
        let s = self.class(c);
        (s.compared > 0).then(|| s.errors as f64 / s.compared as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoyStatistics {
    pub q_signal: Option<f64>,
    pub q_decoy: Option<f64>,
    pub e_signal: Option<f64>,
    pub e_decoy: Option<f64>,
    /// Background yield from vacuum-class clicks.
    pub y0: Option<f64>,
}

pub fn decoy_statistics(stats: &SiftStats) -> DecoyStatistics {
    DecoyStatistics {
        q_signal: stats.gain(PulseClass::Signal),
        q_decoy: stats.gain(PulseClass::Decoy),
        e_signal: stats.error_rate(PulseClass::Signal),
        e_decoy: stats.error_rate(PulseClass::Decoy),
        y0: stats.gain(PulseClass::Vacuum),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftedKeyBlock {
    pub bits: BitString,
    pub slot_indices: Vec<u64>,
    pub stats: SiftStats,
}

impl SiftedKeyBlock {
    pub fn class_tally(&self) -> [u64; 3] {
        self.stats.classes.map(|c| c.detected)
    }

    pub fn sample_qber_signal(&self) -> Option<f64> {
        self.stats.error_rate(PulseClass::Signal)
    }

    pub fn sample_qber_decoy(&self) -> Option<f64> {
        self.stats.error_rate(PulseClass::Decoy)
    }

    pub fn gain_signal(&self) -> Option<f64> {
        self.stats.gain(PulseClass::Signal)
    }

    pub fn gain_decoy(&self) -> Option<f64> {
        self.stats.gain(PulseClass::Decoy)
    }
}

/// Sifted rate `f * p * c * p1 * p2`.
pub fn sifted_rate(f_hz: f64, p_click: f64, c: f64, p1: f64, p2: f64) -> f64 {
    f_hz * p_click * c * p1 * p2
}

/// QBER on every `stride`-th position; returns it with both keys stripped
/// of the disclosed positions.
pub fn estimate_qber(a: &BitString, b: &BitString, stride: usize) -> Result<(f64, BitString, BitString), SiftError> {
    if a.len() != b.len() {
        return Err(SiftError::Malformed("key lengths differ".into()));
    }
    let (mut n, mut e) = (0usize, 0usize);
    let (mut ka, mut kb) = (BitString::new(), BitString::new());
    for i in 0..a.len() {
        if i % stride == 0 {
            n += 1;
            e += (a[i] != b[i]) as usize;
        } else {
            ka.push(a[i]);
            kb.push(b[i]);
        }
    }
    if n == 0 {
        return Err(SiftError::EmptySample);
    }
    Ok((e as f64 / n as f64, ka, kb))
}

/// Runs all three steps in-process through their wire encodings.
///
/// `emitted` is the per-class emission count of the slot range covered by
/// `bob`; only Alice's block carries it (and hence the gains).
pub fn sift<L: PulseLookup + ?Sized>(
    alice: &L,
    emitted: [u64; 3],
    bob: &[Measurement],
    fmt: &FrameFormat,
    stride: usize,
) -> Result<(SiftedKeyBlock, SiftedKeyBlock), SiftError> {
    let announced = decode_announcement(&encode_announcement(bob, fmt), fmt)?;
    let (verdicts, detected) = alice_retain(&announced, alice)?;
    let bob_verdicts = decode_retain(&encode_retain(&verdicts), announced.len())?;

    let alice_bits: Vec<bool> = announced.iter().map(|&(s, _)| alice.descriptor(s).map_or(false, |d| d.bit())).collect();
    let bob_bits: Vec<bool> = bob.iter().map(|m| m.bit).collect();
    let pa = partition(&verdicts, stride);
    let pb = partition(&bob_verdicts, stride);
    let (da, db) = (pa.disclosure(&alice_bits), pb.disclosure(&bob_bits));

    let mut sa = SiftStats::default();
    for c in PulseClass::ALL {
        sa.classes[c.index()].emitted = emitted[c.index()];
        sa.classes[c.index()].detected = detected[c.index()];
    }
    pa.compare(&da, &db, &mut sa)?;
    // Bob only learns the classes of matched detections
    let mut sb = SiftStats::default();
    for &(_, c) in &pb.disclosed {
        sb.classes[c.index()].detected += 1;
    }
    sb.classes[PulseClass::Signal.index()].detected += pb.key.len() as u64;
    pb.compare(&db, &da, &mut sb)?;

    let slots = pa.key_slots(&announced);
    Ok((
        SiftedKeyBlock { bits: pa.key_bits(&alice_bits), slot_indices: slots.clone(), stats: sa },
        SiftedKeyBlock { bits: pb.key_bits(&bob_bits), slot_indices: slots, stats: sb },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{EntropySource, Polarization, PulseDescriptor, PulseTrain};
    use crate::photonics::{expected_click_prob, OpticalConfig, Receiver};

    fn desc(slot: u64, class: PulseClass, pol: Polarization) -> PulseDescriptor {
        PulseDescriptor { class, polarization: pol, slot_index: slot }
    }

    fn m(slot: u64, basis: Basis, bit: bool) -> Measurement {
        Measurement { slot_index: slot, basis, bit }
    }

    #[test]
    fn matched_basis_retained() {
        // the first matched signal bit of a batch is always a sample bit
        let alice = vec![desc(0, PulseClass::Signal, Polarization::H), desc(1, PulseClass::Signal, Polarization::H)];
        let bob = [m(0, Basis::Rect, false), m(1, Basis::Rect, false)];
        let (a, b) = sift(&alice, [2, 0, 0], &bob, &FrameFormat::default(), 10).unwrap();
        assert_eq!(a.stats.class(PulseClass::Signal).compared, 1);
        assert_eq!(a.stats.class(PulseClass::Signal).errors, 0);
        assert_eq!(a.bits, bits::from_bools([false]));
        assert_eq!(b.bits, a.bits);
        assert_eq!(a.slot_indices, vec![1]);
        assert_eq!(b.slot_indices, vec![1]);
    }

    #[test]
    fn mismatched_basis_discarded() {
        let alice = vec![desc(0, PulseClass::Signal, Polarization::P)];
        let (verdicts, detected) = alice_retain(&[(0, Basis::Rect)], &alice).unwrap();
        assert_eq!(verdicts, vec![Retain::Discard]);
        assert_eq!(detected, [1, 0, 0]);
    }

    #[test]
    fn unknown_location_rejected() {
        let alice = vec![desc(0, PulseClass::Signal, Polarization::P)];
        assert_eq!(alice_retain(&[(5, Basis::Rect)], &alice), Err(SiftError::LocationUnknown(5)));
    }

    #[test]
    fn retain_codec_round_trip() {
        let v = vec![
            Retain::Discard,
            Retain::Keep(PulseClass::Signal),
            Retain::Keep(PulseClass::Decoy),
            Retain::Keep(PulseClass::Vacuum),
            Retain::Keep(PulseClass::Signal),
        ];
        let enc = encode_retain(&v);
        assert_eq!(enc, vec![0b00_01_10_11, 0b01_00_00_00]);
        assert_eq!(decode_retain(&enc, 5).unwrap(), v);
        assert!(decode_retain(&enc, 9).is_err());
    }

    #[test]
    fn announcement_hides_bits() {
        let fmt = FrameFormat::default();
        let meas = vec![m(3, Basis::Rect, true), m(2000, Basis::Diag, true)];
        let payload = encode_announcement(&meas, &fmt);
        assert_eq!(decode_announcement(&payload, &fmt).unwrap(), vec![(3, Basis::Rect), (2000, Basis::Diag)]);
        let flipped = encode_announcement(&[m(3, Basis::Rect, false), m(2000, Basis::Diag, false)], &fmt);
        assert_eq!(payload, flipped);
    }

    #[test]
    fn rate_formula() {
        let r = sifted_rate(20e6, 0.01, 0.5, 0.9, 18.0 / 19.0);
        assert!((r / 1e3 - 85.26).abs() < 0.005, "{r}");
        assert_eq!(sifted_rate(20e6, 0.0, 0.5, 0.9, 0.9), 0.0);
        assert!((sifted_rate(20e6, 0.01, 0.5, 1.0, 1.0) - 1e5).abs() < 1e-6);
    }

    #[test]
    fn qber_estimates() {
        let mut rng = EntropySource::new(1);
        let a = rng.next_bits(10_000);
        let (q, ka, kb) = estimate_qber(&a, &a, 10).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(ka.len(), 9000);
        assert_eq!(ka, kb);
        let b = !a.clone();
        assert_eq!(estimate_qber(&a, &b, 10).unwrap().0, 1.0);
        assert_eq!(estimate_qber(&BitString::new(), &BitString::new(), 10), Err(SiftError::EmptySample));

        let a = rng.next_bits(1_000_000);
        let mut b = a.clone();
        for i in 0..b.len() {
            if rng.next_f64() < 0.02 {
                let v = b[i];
                b.set(i, !v);
            }
        }
        let (q, _, _) = estimate_qber(&a, &b, 10).unwrap();
        // 10^5 sampled bits: sigma = 4.4e-4
        assert!((q - 0.02).abs() < 0.003, "{q}");
    }

    /// Straight-line sifter written independently of the message path.
    fn reference_sift(alice: &PulseTrain, bob: &[Measurement], stride: usize) -> (Vec<u64>, Vec<bool>, Vec<bool>, u64, u64) {
        let (mut slots, mut ka, mut kb) = (vec![], vec![], vec![]);
        let (mut nsig, mut compared, mut errors) = (0usize, 0u64, 0u64);
        for x in bob {
            let d = alice.at(x.slot_index);
            if d.basis() != x.basis {
                continue;
            }
            if d.class == PulseClass::Signal {
                if nsig % stride == 0 {
                    compared += 1;
                    errors += (d.bit() != x.bit) as u64;
                } else {
                    slots.push(x.slot_index);
                    ka.push(d.bit());
                    kb.push(x.bit);
                }
                nsig += 1;
            }
        }
        (slots, ka, kb, compared, errors)
    }

    fn simulate(n: u64, seed: u64, cfg: OpticalConfig) -> (PulseTrain, Vec<Measurement>) {
        let train = PulseTrain::with_limit(seed, n);
        let mut rx = Receiver::new(cfg);
        let mut rng = EntropySource::new(seed + 1);
        let mut evs = Vec::new();
        rx.simulate_range(&train, 0..n, &mut rng, &mut evs);
        (train, evs.iter().map(Measurement::from).collect())
    }

    #[test]
    fn matches_reference_sifter() {
        let cfg = OpticalConfig { mu_signal: 3.0, mu_decoy: 1.0, ..Default::default() };
        for seed in [1, 2, 3] {
            let (train, bob) = simulate(10_000, seed * 10, cfg.clone());
            let counts = train.class_counts(0..10_000);
            let (a, b) = sift(&train, counts, &bob, &FrameFormat::default(), 10).unwrap();
            let (slots, ka, kb, compared, errors) = reference_sift(&train, &bob, 10);
            assert_eq!(a.slot_indices, slots);
            assert_eq!(b.slot_indices, slots);
            assert_eq!(a.bits, bits::from_bools(ka));
            assert_eq!(b.bits, bits::from_bools(kb));
            assert_eq!(a.stats.class(PulseClass::Signal).compared, compared);
            assert_eq!(a.stats.class(PulseClass::Signal).errors, errors);
            assert_eq!(b.stats.class(PulseClass::Signal).errors, errors);
        }
    }

    #[test]
    fn default_channel_statistics() {
        let n = 10_000_000;
        let (train, bob) = simulate(n, 77, OpticalConfig::default());
        let counts = train.class_counts(0..n);
        let (a, b) = sift(&train, counts, &bob, &FrameFormat::default(), 10).unwrap();

        // retained key fraction ~ 1/2 basis match * signal share of clicks * 9/10
        let kept = a.bits.len() as f64 / bob.len() as f64;
        let cfg = OpticalConfig::default();
        let qs = expected_click_prob(&cfg, PulseClass::Signal);
        let qd = expected_click_prob(&cfg, PulseClass::Decoy);
        let qv = expected_click_prob(&cfg, PulseClass::Vacuum);
        let signal_share = 6.0 * qs / (6.0 * qs + qd + qv);
        assert!((kept - 0.5 * signal_share * 0.9).abs() < 0.01, "{kept}");

        let st = decoy_statistics(&a.stats);
        assert!((st.q_signal.unwrap() - qs).abs() < 0.0003);
        assert!((st.q_decoy.unwrap() - qd).abs() < 0.0003);
        let hw = crate::bits::hamming_distance(&a.bits, &b.bits) as f64 / a.bits.len() as f64;
        assert!(hw > 0.003 && hw < 0.02, "{hw}");
        assert!(a.stats.class(PulseClass::Decoy).compared > 1000);
        assert_eq!(b.stats.class(PulseClass::Decoy).compared, a.stats.class(PulseClass::Decoy).compared);
    }

    #[test]
    fn noiseless_channel_has_no_errors() {
        let cfg = OpticalConfig {
            dark_count_per_gate: 0.0,
            afterpulse_prob: 0.0,
            crosstalk_extinction: f64::INFINITY,
            ..Default::default()
        };
        let (train, bob) = simulate(2_000_000, 5, cfg);
        let (a, b) = sift(&train, train.class_counts(0..2_000_000), &bob, &FrameFormat::default(), 10).unwrap();
        let st = decoy_statistics(&a.stats);
        assert_eq!(st.e_signal, Some(0.0));
        assert_eq!(st.e_decoy, Some(0.0));
        assert_eq!(a.bits, b.bits);
    }

    #[test]
    fn absent_decoys_reported_absent() {
        let st = decoy_statistics(&SiftStats::default());
        assert_eq!(st.q_decoy, None);
        assert_eq!(st.e_decoy, None);
    }
}
