//! Append-only final-key store with one-time-pad consumption tracking.
//!
//! On disk: `<name>.key` holds the key bits MSB-first (zero-padded to a
//! byte), `<name>.json` the block metadata and consumed ranges.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bits::{self, BitString};

use super::SessionError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBlockMeta {
    pub block_id: u64,
    /// Bits.
    pub length: u64,
    pub sfactor: f64,
    pub qber: f64,
    /// Simulated seconds since session start.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    total_bits: u64,
    blocks: Vec<KeyBlockMeta>,
    /// Half-open bit ranges already used as pad.
    consumed_ranges: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Keystore {
    bits: BitString,
    blocks: Vec<KeyBlockMeta>,
    consumed: Vec<(u64, u64)>,
}

impl Keystore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, meta: KeyBlockMeta, key: &BitString) {
        debug_assert_eq!(meta.length, key.len() as u64);
        self.bits.extend_from_bitslice(key);
        self.blocks.push(meta);
    }

    pub fn bits(&self) -> &BitString {
        &self.bits
    }

    pub fn len_bits(&self) -> u64 {
        self.bits.len() as u64
    }

    pub fn blocks(&self) -> &[KeyBlockMeta] {
        &self.blocks
    }

    pub fn consumed(&self) -> &[(u64, u64)] {
        &self.consumed
    }

    /// First bit never handed out as pad.
    fn cursor(&self) -> u64 {
        self.consumed.iter().map(|r| r.1).max().unwrap_or(0)
    }

    pub fn available(&self) -> u64 {
        self.len_bits() - self.cursor()
    }

    /// SHA-256 of the key file contents.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(bits::to_bytes(&self.bits));
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn overlaps(&self, start: u64, end: u64) -> bool {
        self.consumed.iter().any(|&(s, e)| start < e && s < end)
    }

    fn pad(&self, start: u64, len_bytes: usize) -> Vec<u8> {
        let s = start as usize;
        bits::to_bytes(&self.bits[s..s + 8 * len_bytes])
    }

    /// Encrypts with the next unused key bits; returns the bit offset used.
    pub fn xor_apply(&mut self, payload: &[u8]) -> Result<(u64, Vec<u8>), SessionError> {
        let start = self.cursor();
        if payload.is_empty() {
            return Ok((start, Vec::new()));
        }
        let need = 8 * payload.len() as u64;
        if need > self.available() {
            return Err(SessionError::KeyExhausted { needed: need, available: self.available() });
        }
        let out = xor(payload, &self.pad(start, payload.len()));
        self.consumed.push((start, start + need));
        Ok((start, out))
    }

    /// Applies the pad at an explicit offset (the peer's side of [`xor_apply`]).
    pub fn xor_at(&mut self, offset: u64, payload: &[u8]) -> Result<Vec<u8>, SessionError> {
        if payload.is_empty() {
            return Ok(Vec::new());
        }
        let need = 8 * payload.len() as u64;
        let end = offset.checked_add(need).ok_or(SessionError::KeyExhausted { needed: need, available: 0 })?;
        if end > self.len_bits() {
            return Err(SessionError::KeyExhausted { needed: need, available: self.len_bits().saturating_sub(offset) });
        }
        if self.overlaps(offset, end) {
            return Err(SessionError::KeyReuse { start: offset, end });
        }
        let out = xor(payload, &self.pad(offset, payload.len()));
        self.consumed.push((offset, end));
        Ok(out)
    }

    pub fn paths(base: &Path) -> (PathBuf, PathBuf) {
        (base.with_extension("key"), base.with_extension("json"))
    }

    /// Writes `<base>.key` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<(), SessionError> {
        let (key, meta) = Self::paths(base);
        std::fs::write(&key, bits::to_bytes(&self.bits))?;
        self.save_sidecar(&meta)
    }

    fn save_sidecar(&self, meta: &Path) -> Result<(), SessionError> {
        let side = Sidecar { total_bits: self.len_bits(), blocks: self.blocks.clone(), consumed_ranges: self.consumed.clone() };
        std::fs::write(meta, serde_json::to_string_pretty(&side).expect("sidecar serializes"))?;
        Ok(())
    }

    /// Persists only the metadata, e.g. after consuming pad.
    pub fn save_metadata(&self, base: &Path) -> Result<(), SessionError> {
        self.save_sidecar(&Self::paths(base).1)
    }

    /// Accepts either the base path or the `.key` file itself.
    pub fn load(base: &Path) -> Result<Self, SessionError> {
        let (key, meta) = Self::paths(base);
        let bytes = std::fs::read(&key)?;
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&meta)?)
            .map_err(|e| SessionError::Corrupt(format!("{}: {e}", meta.display())))?;
        if side.total_bits.div_ceil(8) != bytes.len() as u64 {
            return Err(SessionError::Corrupt(format!("{} length disagrees with metadata", key.display())));
        }
        Ok(Self { bits: bits::from_bytes(&bytes, side.total_bits as usize), blocks: side.blocks, consumed: side.consumed_ranges })
    }
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// Ciphertext container of the key-application demo:
/// `"QKX1"`, u64 BE pad offset in bits, u64 BE payload length, payload.
pub mod container {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"QKX1";

    pub fn seal(offset: u64, ciphertext: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(offset.to_be_bytes());
        out.extend((ciphertext.len() as u64).to_be_bytes());
        out.extend_from_slice(ciphertext);
        out
    }

    pub fn open(data: &[u8]) -> Result<(u64, &[u8]), SessionError> {
        let bad = || SessionError::Corrupt("not a QKX1 ciphertext".into());
        if data.len() < 20 || &data[..4] != MAGIC {
            return Err(bad());
        }
        let offset = u64::from_be_bytes(data[4..12].try_into().unwrap());
        let len = u64::from_be_bytes(data[12..20].try_into().unwrap());
        if data.len() as u64 - 20 != len {
            return Err(bad());
        }
        Ok((offset, &data[20..]))
    }
}
