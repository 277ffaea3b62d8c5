//! JSON run configuration. Unknown keys are rejected and every omitted key
//! takes its default, so `parse -> serialize` materializes the full document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::photonics::OpticalConfig;
use crate::reconcile::ReconcileConfig;
use crate::syncframe::FrameFormat;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivampConfig {
    /// Corrected-key bits hashed per privacy amplification round.
    pub unit_bits: usize,
    pub block_size: usize,
    /// Statistical fluctuation allowance of the decoy bound.
    pub confidence_sigmas: f64,
}

impl Default for PrivampConfig {
    fn default() -> Self {
        Self { unit_bits: 262_144, block_size: 40, confidence_sigmas: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// Corrupt the CRC of every n-th data frame on first transmission (0 = never).
    pub corrupt_every: u64,
    /// Sever the link once Alice has sent this many data frames.
    pub kill_after_messages: Option<u64>,
    pub force_restart_at_s: Option<u64>,
    /// Bob's gate drifts off the pulses, cutting detection efficiency tenfold.
    pub gate_slip_at_s: Option<u64>,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self { corrupt_every: 0, kill_after_messages: None, force_restart_at_s: None, gate_slip_at_s: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Simulated seconds; one control tick per second.
    pub duration_s: u64,
    pub seed: u64,
    pub transport: TransportKind,
    pub listen: String,
    pub connect: String,
    /// Simulate only every n-th frame; reported rates are scaled back up.
    pub frame_sampling: u32,
    pub sift_block_bits: usize,
    /// Bob's slot counter minus Alice's before alignment.
    pub sync_offset_slots: i64,
    pub align_search_range: i64,
    /// Retransmission timeout; loopback links use a tenth of it.
    pub retransmit_timeout_ms: u64,
    /// Give up on a silent peer after this long.
    pub peer_timeout_ms: u64,
    pub output_dir: String,
    pub faults: FaultConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            duration_s: 600,
            seed: 1,
            transport: TransportKind::Loopback,
            listen: "127.0.0.1:47110".into(),
            connect: "127.0.0.1:47110".into(),
            frame_sampling: 1,
            sift_block_bits: 4096,
            sync_offset_slots: 3,
            align_search_range: 10,
            retransmit_timeout_ms: 1000,
            peer_timeout_ms: 60_000,
            output_dir: "qkd-out".into(),
            faults: FaultConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub qber_threshold: f64,
    /// Sampled bits in the rolling QBER window.
    pub qber_window_bits: u64,
    pub feedback_target_extinction: f64,
    pub feedback_duration_s: u32,
    /// Relative click-rate change that pauses sifting.
    pub click_rate_deviation: f64,
    pub delay_adjust_duration_s: u32,
    /// Consecutive feedbacks that fail to bring QBER under threshold before a restart.
    pub max_feedback_failures: u32,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            qber_threshold: 0.03,
            qber_window_bits: 10_000,
            feedback_target_extinction: 150.0,
            feedback_duration_s: 60,
            click_rate_deviation: 0.5,
            delay_adjust_duration_s: 5,
            max_feedback_failures: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optical: OpticalConfig,
    pub frame: FrameFormat,
    pub reconcile: ReconcileConfig,
    pub privamp: PrivampConfig,
    pub session: SessionConfig,
    pub control: ControlConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.optical.validate().map_err(|e| inv(&e))?;
        self.frame.validate().map_err(|e| inv(&e))?;
        self.reconcile.validate().map_err(|e| inv(&e))?;
        let bad = |s: &str| Err(ConfigError::Invalid(s.to_string()));
        let p = &self.privamp;
        if p.block_size == 0 || p.confidence_sigmas < 0.0 {
            return bad("privamp.block_size must be positive and confidence_sigmas non-negative");
        }
        let s = &self.session;
        if s.sift_block_bits < 64 || p.unit_bits == 0 || p.unit_bits % s.sift_block_bits != 0 {
            return bad("privamp.unit_bits must be a positive multiple of session.sift_block_bits (>= 64)");
        }
        if s.frame_sampling == 0 {
            return bad("session.frame_sampling must be positive");
        }
        if s.align_search_range < 0 || s.sync_offset_slots.abs() > s.align_search_range {
            return bad("session.sync_offset_slots must lie within align_search_range");
        }
        if s.retransmit_timeout_ms == 0 || s.peer_timeout_ms == 0 {
            return bad("timeouts must be positive");
        }
        let c = &self.control;
        if !(c.qber_threshold > 0.0 && c.qber_threshold < 0.5) || c.qber_window_bits == 0 {
            return bad("control.qber_threshold must lie in (0, 0.5) and the window be non-empty");
        }
        if !(c.feedback_target_extinction > 0.0) || !(c.click_rate_deviation > 0.0) || c.max_feedback_failures == 0 {
            return bad("control thresholds must be positive");
        }
        Ok(())
    }
}
