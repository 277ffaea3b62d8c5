//! Frame synchronisation between Alice's clock and Bob's detection records.
//!
//! Each frame is `k` signal clocks followed by `n` low clocks. Bob stores a
//! 32-bit head (the frame counter) and one 16-bit record per detection:
//!
//! ```text
//!  15            6   5     4     3     2..0
//! +---------------+-----+-----+-----+--------+
//! | slot in frame | bas | bit | END | unused |
//! +---------------+-----+-----+-----+--------+
//! ```
//!
//! `END` marks the last record of a frame in a serialized stream. Heads and
//! records are written big-endian, head first. The global slot index of a
//! record is `head * k + slot_in_frame`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{Basis, PulseClass, PulseLookup};
use crate::photonics::DetectionEvent;

pub const END_FLAG: u8 = 0b1000;
const SLOT_BITS: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("slot {slot} outside frame {frame}")]
    SlotOutOfRange { frame: u32, slot: u64 },
    #[error("invalid frame format: {0}")]
    InvalidFormat(String),
    #[error("click probability must be positive")]
    DomainError,
    #[error("truncated or malformed frame stream at byte {0}")]
    Malformed(usize),
    #[error("frame head never re-acquired")]
    HeadNotFound,
    #[error("no offset gives QBER below 25% (best {best_qber:.3} at {best_offset})")]
    NoAlignment { best_offset: i64, best_qber: f64 },
    #[error("only {0} matched-basis comparisons, need {MIN_ALIGN_COMPARISONS}")]
    InsufficientComparisons(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameFormat {
    pub k_signal_clocks: u32,
    pub n_low_clocks: u32,
    pub head_bits: u32,
    pub record_bits: u32,
}

impl Default for FrameFormat {
    fn default() -> Self {
        Self { k_signal_clocks: 1018, n_low_clocks: 6, head_bits: 32, record_bits: 16 }
    }
}

impl FrameFormat {
    pub fn frame_clocks(&self) -> u64 {
        (self.k_signal_clocks + self.n_low_clocks) as u64
    }

    /// Checks the format against the fixed wire layout.
    pub fn validate(&self) -> Result<(), SyncError> {
        let bad = |s: &str| Err(SyncError::InvalidFormat(s.to_string()));
        if self.k_signal_clocks == 0 {
            return bad("k_signal_clocks must be positive");
        }
        if self.k_signal_clocks > 1 << SLOT_BITS {
            return bad("k_signal_clocks must fit the 10-bit slot field");
        }
        if self.n_low_clocks == 0 {
            return bad("n_low_clocks must be positive to delimit frames");
        }
        let need = 32 - (self.k_signal_clocks - 1).leading_zeros() + 2;
        if self.record_bits != 16 || self.record_bits < need {
            return bad("record_bits must be 16");
        }
        if self.head_bits != 32 {
            return bad("head_bits must be 32");
        }
        Ok(())
    }

    pub fn frame_of(&self, slot: u64) -> u32 {
        (slot / self.k_signal_clocks as u64) as u32
    }

    pub fn first_slot(&self, frame: u32) -> u64 {
        frame as u64 * self.k_signal_clocks as u64
    }
}

/// Fraction of clocks spent on low (sync) clocks: `n / (k + n)`.
pub fn overhead_fraction(fmt: &FrameFormat) -> f64 {
    if fmt.frame_clocks() == 0 {
        return 0.0;
    }
    fmt.n_low_clocks as f64 / fmt.frame_clocks() as f64
}

/// Bob's coding data rate `f * p * (record + head / (k * p))` in bits/s.
pub fn coding_rate_bob(f_hz: f64, p_click: f64, fmt: &FrameFormat) -> Result<f64, SyncError> {
    if !(p_click > 0.0) {
        return Err(SyncError::DomainError);
    }
    let per_click = fmt.record_bits as f64 + fmt.head_bits as f64 / (fmt.k_signal_clocks as f64 * p_click);
    Ok(f_hz * p_click * per_click)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub slot_in_frame: u16,
    pub basis: Basis,
    pub bit: bool,
    pub flags: u8,
}

impl DetectionRecord {
    pub fn to_u16(self) -> u16 {
        (self.slot_in_frame << 6) | ((self.basis.bit() as u16) << 5) | ((self.bit as u16) << 4) | (self.flags & 0xF) as u16
    }

    pub fn from_u16(w: u16) -> Self {
        Self {
            slot_in_frame: w >> 6,
            basis: Basis::from_bit(w & 0x20 != 0),
            bit: w & 0x10 != 0,
            flags: (w & 0xF) as u8,
        }
    }
}

/// One Bob measurement on the global slot axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub slot_index: u64,
    pub basis: Basis,
    pub bit: bool,
}

impl From<&DetectionEvent> for Measurement {
    fn from(ev: &DetectionEvent) -> Self {
        Self { slot_index: ev.slot_index, basis: ev.basis, bit: ev.bit }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameData {
    pub frame_index: u32,
    pub records: Vec<DetectionRecord>,
}

pub fn encode_frame(frame_index: u32, events: &[Measurement], fmt: &FrameFormat) -> Result<FrameData, SyncError> {
    let first = fmt.first_slot(frame_index);
    let mut records = Vec::with_capacity(events.len());
    for ev in events {
        let rel = ev.slot_index.wrapping_sub(first);
        if ev.slot_index < first || rel >= fmt.k_signal_clocks as u64 {
            return Err(SyncError::SlotOutOfRange { frame: frame_index, slot: ev.slot_index });
        }
        records.push(DetectionRecord { slot_in_frame: rel as u16, basis: ev.basis, bit: ev.bit, flags: 0 });
    }
    records.sort_by_key(|r| r.slot_in_frame);
    Ok(FrameData { frame_index, records })
}

impl FrameData {
    pub fn decode(&self, fmt: &FrameFormat) -> Vec<Measurement> {
        let first = fmt.first_slot(self.frame_index);
        self.records
            .iter()
            .map(|r| Measurement { slot_index: first + r.slot_in_frame as u64, basis: r.basis, bit: r.bit })
            .collect()
    }

    pub fn bit_len(&self) -> usize {
        32 + 16 * self.records.len()
    }

    /// Head and records, END flag on the last record. Empty frames are
    /// not representable in a stream and serialize to nothing.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        if self.records.is_empty() {
            return;
        }
        out.extend_from_slice(&self.frame_index.to_be_bytes());
        let last = self.records.len() - 1;
        for (i, r) in self.records.iter().enumerate() {
            let flags = if i == last { END_FLAG } else { 0 };
            out.extend_from_slice(&DetectionRecord { flags, ..*r }.to_u16().to_be_bytes());
        }
    }
}

/// Groups events (sorted by slot) into frames.
pub fn frames_from_events(events: &[Measurement], fmt: &FrameFormat) -> Vec<FrameData> {
    let mut frames = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let frame = fmt.frame_of(events[start].slot_index);
        let end = start + events[start..].partition_point(|e| fmt.frame_of(e.slot_index) == frame);
        frames.push(encode_frame(frame, &events[start..end], fmt).expect("events grouped by frame"));
        start = end;
    }
    frames
}

pub fn encode_stream(frames: &[FrameData]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        f.write_to(&mut out);
    }
    out
}

pub fn decode_stream(bytes: &[u8]) -> Result<Vec<FrameData>, SyncError> {
    let mut frames = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let head = bytes.get(pos..pos + 4).ok_or(SyncError::Malformed(pos))?;
        let frame_index = u32::from_be_bytes(head.try_into().unwrap());
        pos += 4;
        let mut records = Vec::new();
        loop {
            let w = bytes.get(pos..pos + 2).ok_or(SyncError::Malformed(pos))?;
            pos += 2;
            let r = DetectionRecord::from_u16(u16::from_be_bytes([w[0], w[1]]));
            records.push(DetectionRecord { flags: r.flags & !END_FLAG, ..r });
            if r.flags & END_FLAG != 0 {
                break;
            }
        }
        frames.push(FrameData { frame_index, records });
    }
    Ok(frames)
}

/// One clock period as seen by Bob's acquisition logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// A gate, with the (basis, bit) of a click if one occurred.
    Signal(Option<(Basis, bool)>),
    Low,
}

/// Expands per-frame gate outcomes into the physical clock sequence.
pub fn clock_stream(frames: &[Vec<Option<(Basis, bool)>>], fmt: &FrameFormat) -> Vec<Clock> {
    let mut out = Vec::with_capacity(frames.len() * fmt.frame_clocks() as usize);
    for f in frames {
        out.extend(f.iter().map(|c| Clock::Signal(*c)));
        out.extend(std::iter::repeat_n(Clock::Low, fmt.n_low_clocks as usize));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResyncFrame {
    pub frame: FrameData,
    /// Signal-clock count differed from `k`; records are unusable.
    pub corrupt: bool,
}

/// Splits a clock sequence into frames at runs of low clocks.
///
/// A frame whose body does not hold exactly `k` signal clocks is flagged
/// corrupt and its records dropped; counting restarts at the next head.
pub fn resync_stream(clocks: &[Clock], fmt: &FrameFormat, first_frame: u32) -> Result<Vec<ResyncFrame>, SyncError> {
    if !clocks.is_empty() && !clocks.contains(&Clock::Low) {
        return Err(SyncError::HeadNotFound);
    }
    let k = fmt.k_signal_clocks as usize;
    let mut out = Vec::new();
    let mut body: Vec<Option<(Basis, bool)>> = Vec::with_capacity(k);
    let mut frame_index = first_frame;
    let mut in_low = false;
    let flush = |body: &mut Vec<Option<(Basis, bool)>>, frame_index: u32, out: &mut Vec<ResyncFrame>| {
        let corrupt = body.len() != k;
        let records = if corrupt {
            Vec::new()
        } else {
            body.iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|(basis, bit)| DetectionRecord { slot_in_frame: i as u16, basis, bit, flags: 0 }))
                .collect()
        };
        out.push(ResyncFrame { frame: FrameData { frame_index, records }, corrupt });
        body.clear();
    };
    for c in clocks {
        match c {
            Clock::Signal(x) => {
                in_low = false;
                body.push(*x);
            }
            Clock::Low => {
                if !in_low {
                    flush(&mut body, frame_index, &mut out);
                    frame_index = frame_index.wrapping_add(1);
                }
                in_low = true;
            }
        }
    }
    if !body.is_empty() {
        flush(&mut body, frame_index, &mut out);
    }
    Ok(out)
}

pub const ALIGN_THRESHOLD: f64 = 0.25;
pub const MIN_ALIGN_COMPARISONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Bob's slot index minus Alice's for the same pulse.
    pub offset: i64,
    pub qber: f64,
    /// `(offset, qber, comparisons)` for every candidate.
    pub scan: Vec<(i64, f64, usize)>,
}

/// QBER of `bob` against `alice` assuming Bob's slots are shifted by `offset`.
/// Vacuum pulses carry no bit and are skipped.
pub fn qber_at_offset<L: PulseLookup + ?Sized>(bob: &[Measurement], alice: &L, offset: i64) -> (usize, usize) {
    let (mut compared, mut errors) = (0, 0);
    for m in bob {
        let Some(slot) = m.slot_index.checked_add_signed(-offset) else { continue };
        let Some(d) = alice.descriptor(slot) else { continue };
        if d.class != PulseClass::Vacuum && d.basis() == m.basis {
            compared += 1;
            errors += (d.bit() != m.bit) as usize;
        }
    }
    (compared, errors)
}

/// Scans offsets in `-range..=range` and returns the one with minimal QBER.
pub fn align_offset<L: PulseLookup + ?Sized>(bob: &[Measurement], alice: &L, range: i64) -> Result<Alignment, SyncError> {
    let mut scan = Vec::with_capacity((2 * range + 1) as usize);
    for offset in -range..=range {
        let (n, e) = qber_at_offset(bob, alice, offset);
        if n < MIN_ALIGN_COMPARISONS {
            return Err(SyncError::InsufficientComparisons(n));
        }
        scan.push((offset, e as f64 / n as f64, n));
    }
    let &(offset, qber, _) = scan
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty range");
    if qber >= ALIGN_THRESHOLD {
        return Err(SyncError::NoAlignment { best_offset: offset, best_qber: qber });
    }
    Ok(Alignment { offset, qber, scan })
}
