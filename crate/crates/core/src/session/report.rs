//! Per-tick statistics, run totals, and their CSV / JSON exports.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;

use super::control::ControlEvent;
use super::keystore::Keystore;
use super::transport::Side;
use super::wire::Command;
use super::SessionError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickRecord {
    pub time_s: u64,
    /// Rolling signal QBER; empty on ticks that produced no key.
    pub qber: Option<f64>,
    pub sifted_bps: f64,
    pub corrected_bps: f64,
    pub final_bps: f64,
    pub mode: &'static str,
}

pub(crate) fn mode_name(c: Command) -> &'static str {
    match c {
        Command::Run => "running",
        Command::Realign => "realign",
        Command::Feedback { .. } => "feedback",
        Command::Pause { .. } => "pause",
        Command::Restart => "restart",
        Command::Stop => "stop",
    }
}

/// Bit counts are of simulated frames only; rates scale them back up.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub sifted_bits: u64,
    pub corrected_bits: u64,
    pub final_bits: u64,
    pub leaked_bits: u64,
    pub signal_compared: u64,
    pub signal_errors: u64,
    pub blocks_ok: u64,
    pub blocks_failed: u64,
    pub rounds: u64,
    pub restarts: u64,
    pub link_failures: u64,
    /// Frames that failed their CRC on arrival.
    pub frames_dropped: u64,
    pub frames_retransmitted: u64,
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub side: Side,
    pub duration_s: u64,
    pub frame_sampling: u32,
    pub ticks: Vec<TickRecord>,
    pub events: Vec<(u64, ControlEvent)>,
    pub feedback_events: u32,
    pub sfactors: Vec<f64>,
    pub totals: Totals,
    pub keystore: Keystore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub avg_qber: f64,
    pub avg_final_bps: f64,
    pub feedback_events: u32,
    pub avg_sifted_bps: f64,
    pub avg_corrected_bps: f64,
    pub final_key_bits: u64,
    pub key_digest: String,
    pub blocks_ok: u64,
    pub blocks_failed: u64,
    pub restarts: u64,
    pub link_failures: u64,
    pub duration_s: u64,
    pub frame_sampling: u32,
}

impl SessionReport {
    pub fn new(side: Side, cfg: &RunConfig) -> Self {
        Self {
            side,
            duration_s: cfg.session.duration_s,
            frame_sampling: cfg.session.frame_sampling,
            ticks: Vec::new(),
            events: Vec::new(),
            feedback_events: 0,
            sfactors: Vec::new(),
            totals: Totals::default(),
            keystore: Keystore::new(),
        }
    }

    fn per_second(&self, bits: u64) -> f64 {
        if self.duration_s == 0 { 0.0 } else { bits as f64 * self.frame_sampling as f64 / self.duration_s as f64 }
    }

    pub fn avg_qber(&self) -> f64 {
        let t = &self.totals;
        if t.signal_compared == 0 { 0.0 } else { t.signal_errors as f64 / t.signal_compared as f64 }
    }

    pub fn avg_final_bps(&self) -> f64 {
        self.per_second(self.totals.final_bits)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            avg_qber: self.avg_qber(),
            avg_final_bps: self.avg_final_bps(),
            feedback_events: self.feedback_events,
            avg_sifted_bps: self.per_second(self.totals.sifted_bits),
            avg_corrected_bps: self.per_second(self.totals.corrected_bits),
            final_key_bits: self.keystore.len_bits(),
            key_digest: self.keystore.digest(),
            blocks_ok: self.totals.blocks_ok,
            blocks_failed: self.totals.blocks_failed,
            restarts: self.totals.restarts,
            link_failures: self.totals.link_failures,
            duration_s: self.duration_s,
            frame_sampling: self.frame_sampling,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SessionError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| SessionError::Io(e.into()))?;
        if self.ticks.is_empty() {
            w.write_record(["time_s", "qber", "sifted_bps", "corrected_bps", "final_bps", "mode"])
                .map_err(|e| SessionError::Io(e.into()))?;
        }
        for t in &self.ticks {
            w.serialize(t).map_err(|e| SessionError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<(), SessionError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.summary()).expect("summary serializes"))?;
        Ok(())
    }
}
