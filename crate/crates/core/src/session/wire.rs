//! Classical-channel framing and the session-level payloads.
//!
//! ```text
//! 0     2    3     4      5        9          9+len
//! | QK | ver | port | type | len LE | payload | crc32 LE |
//! ```
//!
//! The CRC covers header and payload.

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x51, 0x4B];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 9;
pub const TRAILER_LEN: usize = 4;
/// Upper bound on a payload; anything longer is treated as stream corruption.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Port {
    SiftUp = 0,
    EcUp = 1,
    SiftDown = 2,
    CommandDown = 3,
}

impl Port {
    pub const ALL: [Port; 4] = [Port::SiftUp, Port::EcUp, Port::SiftDown, Port::CommandDown];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

pub mod msg {
    pub const TICK_CMD: u8 = 0x01;
    pub const BASIS_LOC: u8 = 0x10;
    pub const RETAIN: u8 = 0x11;
    pub const SAMPLE_DISCLOSE: u8 = 0x12;
    pub const ALIGN_SAMPLE: u8 = 0x13;
    pub const ALIGN_RESULT: u8 = 0x14;
    pub const PARITY_VEC: u8 = 0x20;
    pub const SYNDROME_REQ: u8 = 0x21;
    pub const SYNDROME_RSP: u8 = 0x22;
    pub const CRC_CHECK: u8 = 0x23;
    pub const BLOCK_VERDICT: u8 = 0x24;
    pub const SFACTOR_ANNOUNCE: u8 = 0x30;
    pub const TOEPLITZ_SEED: u8 = 0x31;
    pub const KEY_ACK: u8 = 0x32;
    pub const RESTART_SYNC: u8 = 0x3F;
    // link control, never delivered to a port
    pub const LINK_ACK: u8 = 0xF1;
    pub const LINK_NAK: u8 = 0xF2;
    pub const LINK_RESYNC: u8 = 0xF3;

    pub fn is_link_control(t: u8) -> bool {
        t >= 0xF0
    }

    pub fn name(t: u8) -> &'static str {
        match t {
            TICK_CMD => "TICK_CMD",
            BASIS_LOC => "BASIS_LOC",
            RETAIN => "RETAIN",
            SAMPLE_DISCLOSE => "SAMPLE_DISCLOSE",
            ALIGN_SAMPLE => "ALIGN_SAMPLE",
            ALIGN_RESULT => "ALIGN_RESULT",
            PARITY_VEC => "PARITY_VEC",
            SYNDROME_REQ => "SYNDROME_REQ",
            SYNDROME_RSP => "SYNDROME_RSP",
            CRC_CHECK => "CRC_CHECK",
            BLOCK_VERDICT => "BLOCK_VERDICT",
            SFACTOR_ANNOUNCE => "SFACTOR_ANNOUNCE",
            TOEPLITZ_SEED => "TOEPLITZ_SEED",
            KEY_ACK => "KEY_ACK",
            RESTART_SYNC => "RESTART_SYNC",
            LINK_ACK => "LINK_ACK",
            LINK_NAK => "LINK_NAK",
            LINK_RESYNC => "LINK_RESYNC",
            _ => "UNKNOWN",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("bad magic or version")]
    BadHeader,
    #[error("crc mismatch")]
    Crc,
    #[error("invalid port {0}")]
    BadPort(u8),
    #[error("payload length {0} out of range")]
    BadLength(usize),
    #[error("malformed {0} payload")]
    Payload(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalMessage {
    pub port: Port,
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl ClassicalMessage {
    pub fn new(port: Port, msg_type: u8, payload: Vec<u8>) -> Self {
        Self { port, msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TRAILER_LEN);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.port as u8);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Payload length announced by a header, after checking magic and version.
    pub fn frame_len(header: &[u8]) -> Result<usize, WireError> {
        if header.len() < HEADER_LEN {
            return Err(WireError::Truncated);
        }
        if header[..2] != MAGIC || header[2] != VERSION {
            return Err(WireError::BadHeader);
        }
        let len = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::BadLength(len));
        }
        Ok(HEADER_LEN + len + TRAILER_LEN)
    }

    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        let total = Self::frame_len(frame)?;
        if frame.len() != total {
            return Err(WireError::Truncated);
        }
        let body = &frame[..total - TRAILER_LEN];
        let crc = u32::from_le_bytes(frame[total - TRAILER_LEN..].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(WireError::Crc);
        }
        let port = Port::from_u8(frame[3]).ok_or(WireError::BadPort(frame[3]))?;
        Ok(Self { port, msg_type: frame[4], payload: body[HEADER_LEN..].to_vec() })
    }
}

/// Little-endian field reader.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Payload(self.what));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        Ok(self.u64()? as i64)
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() { Ok(()) } else { Err(WireError::Payload(self.what)) }
    }
}

/// What Alice tells Bob to do with one simulated second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    /// Disclose a detection sample so Alice can locate the slot offset.
    Realign,
    /// No key; `last` restores the extinction ratio at the end of the tick.
    Feedback { last: bool },
    /// No key; `last` re-centres the detector gate.
    Pause { last: bool },
    /// Discard all in-flight material.
    Restart,
    Stop,
}

impl Command {
    fn code(self) -> (u8, u8) {
        match self {
            Command::Run => (0, 0),
            Command::Realign => (1, 0),
            Command::Feedback { last } => (2, last as u8),
            Command::Pause { last } => (3, last as u8),
            Command::Restart => (4, 0),
            Command::Stop => (5, 0),
        }
    }

    fn from_code(c: u8, flag: u8) -> Option<Self> {
        Some(match (c, flag) {
            (0, 0) => Command::Run,
            (1, 0) => Command::Realign,
            (2, f @ (0 | 1)) => Command::Feedback { last: f == 1 },
            (3, f @ (0 | 1)) => Command::Pause { last: f == 1 },
            (4, 0) => Command::Restart,
            (5, 0) => Command::Stop,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickCmd {
    pub tick: u64,
    pub command: Command,
    /// Highest privacy-amplification round Alice has committed (0 = none).
    pub committed: u64,
}

impl TickCmd {
    pub fn encode(&self) -> Vec<u8> {
        let (c, f) = self.command.code();
        let mut out = self.tick.to_le_bytes().to_vec();
        out.extend([c, f]);
        out.extend(self.committed.to_le_bytes());
        out
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "TICK_CMD");
        let tick = r.u64()?;
        let (c, f) = (r.u8()?, r.u8()?);
        let command = Command::from_code(c, f).ok_or(WireError::Payload("TICK_CMD"))?;
        let committed = r.u64()?;
        r.finish()?;
        Ok(Self { tick, command, committed })
    }
}

/// Tick number followed by an opaque body (frame stream, verdicts, ...).
pub fn encode_tagged(tick: u64, body: &[u8]) -> Vec<u8> {
    let mut out = tick.to_le_bytes().to_vec();
    out.extend_from_slice(body);
    out
}

pub fn decode_tagged<'a>(p: &'a [u8], what: &'static str) -> Result<(u64, &'a [u8]), WireError> {
    let mut r = Reader::new(p, what);
    let tick = r.u64()?;
    Ok((tick, r.rest()))
}

/// Tick, bit count, then the bits MSB-first.
pub fn encode_bits(tick: u64, bits: &crate::bits::BitString) -> Vec<u8> {
    let mut out = tick.to_le_bytes().to_vec();
    out.extend((bits.len() as u32).to_le_bytes());
    out.extend(crate::bits::to_bytes(bits));
    out
}

pub fn decode_bits(p: &[u8], what: &'static str) -> Result<(u64, crate::bits::BitString), WireError> {
    let mut r = Reader::new(p, what);
    let tick = r.u64()?;
    let n = r.u32()? as usize;
    let body = r.take(n.div_ceil(8))?;
    r.finish()?;
    Ok((tick, crate::bits::from_bytes(body, n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignResult {
    pub tick: u64,
    /// Bob slot minus Alice slot, or `None` when no offset qualified.
    pub offset: Option<i64>,
}

impl AlignResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tick.to_le_bytes().to_vec();
        out.push(self.offset.is_some() as u8);
        out.extend(self.offset.unwrap_or(0).to_le_bytes());
        out
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "ALIGN_RESULT");
        let tick = r.u64()?;
        let ok = r.u8()?;
        let off = r.i64()?;
        r.finish()?;
        match ok {
            0 => Ok(Self { tick, offset: None }),
            1 => Ok(Self { tick, offset: Some(off) }),
            _ => Err(WireError::Payload("ALIGN_RESULT")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SFactorAnnounce {
    pub round: u64,
    pub n: u32,
    pub m: u32,
    pub sfactor: f64,
}

impl SFactorAnnounce {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.round.to_le_bytes().to_vec();
        out.extend(self.n.to_le_bytes());
        out.extend(self.m.to_le_bytes());
        out.extend(self.sfactor.to_bits().to_le_bytes());
        out
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "SFACTOR_ANNOUNCE");
        let v = Self { round: r.u64()?, n: r.u32()?, m: r.u32()?, sfactor: r.f64()? };
        r.finish()?;
        Ok(v)
    }
}

/// Round id and a u64; used by TOEPLITZ_SEED (seed) and KEY_ACK (key length).
pub fn encode_pair(round: u64, value: u64) -> Vec<u8> {
    let mut out = round.to_le_bytes().to_vec();
    out.extend(value.to_le_bytes());
    out
}

pub fn decode_pair(p: &[u8], what: &'static str) -> Result<(u64, u64), WireError> {
    let mut r = Reader::new(p, what);
    let v = (r.u64()?, r.u64()?);
    r.finish()?;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestartSync {
    pub tick: u64,
    pub committed: u64,
    pub next_block: u64,
    pub next_round: u64,
}

impl RestartSync {
    pub fn encode(&self) -> Vec<u8> {
        [self.tick, self.committed, self.next_block, self.next_round].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "RESTART_SYNC");
        let v = Self { tick: r.u64()?, committed: r.u64()?, next_block: r.u64()?, next_round: r.u64()? };
        r.finish()?;
        Ok(v)
    }
}
