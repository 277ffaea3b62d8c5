//! Monte Carlo model of the source, fiber and four gated detectors.
//!
//! Photon numbers are Poisson in the class mean; each photon survives fiber,
//! receiver optics and detector efficiency independently. Bob's passive
//! beamsplitter picks one basis per gate. Detectors are numbered like
//! polarizations: 0=H, 1=V, 2=P, 3=N.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{EntropySource, PulseClass, PulseDescriptor, PulseTrain};
pub use crate::entropy::Basis;

/// Extinction ratio that uncorrected drift decays toward.
pub const EXTINCTION_FLOOR: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhotonicsError {
    #[error("invalid optical config: {0}")]
    InvalidConfig(String),
    #[error("click rate must be positive")]
    DivisionByZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticalConfig {
    pub pulse_rate_hz: f64,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub mu_vacuum: f64,
    pub fiber_loss_db: f64,
    pub receiver_loss_db: f64,
    pub detector_efficiency: f64,
    pub dark_count_per_gate: f64,
    pub afterpulse_prob: f64,
    /// Correct:wrong detector ratio for an aligned polarization.
    pub crosstalk_extinction: f64,
    /// Exponential decay rate (1/s) of the extinction ratio toward
    /// [`EXTINCTION_FLOOR`].
    pub drift_rate: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            pulse_rate_hz: 20e6,
            mu_signal: 0.6,
            mu_decoy: 0.2,
            mu_vacuum: 0.0,
            fiber_loss_db: 4.5,
            receiver_loss_db: 3.0,
            detector_efficiency: 0.12,
            dark_count_per_gate: 5e-6,
            afterpulse_prob: 1e-3,
            crosstalk_extinction: 150.0,
            drift_rate: 0.0,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        let bad = |what: &str| Err(PhotonicsError::InvalidConfig(what.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.pulse_rate_hz > 0.0 && self.pulse_rate_hz.is_finite()) {
            return bad("pulse_rate_hz must be positive");
        }
        if [self.mu_signal, self.mu_decoy, self.mu_vacuum].iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return bad("mean photon numbers must be non-negative");
        }
        if !(self.fiber_loss_db >= 0.0 && self.receiver_loss_db >= 0.0) {
            return bad("losses must be non-negative");
        }
        if !prob(self.detector_efficiency) || !prob(self.dark_count_per_gate) || !prob(self.afterpulse_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.crosstalk_extinction > 0.0) {
            return bad("crosstalk_extinction must be positive");
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return bad("drift_rate must be non-negative");
        }
        Ok(())
    }

    pub fn mu(&self, class: PulseClass) -> f64 {
        match class {
            PulseClass::Signal => self.mu_signal,
            PulseClass::Decoy => self.mu_decoy,
            PulseClass::Vacuum => self.mu_vacuum,
        }
    }

    /// Overall single-photon detection probability, losses and efficiency included.
    pub fn transmittance(&self) -> f64 {
        10f64.powf(-(self.fiber_loss_db + self.receiver_loss_db) / 10.0) * self.detector_efficiency
    }

    /// Mean photon number over the 6:1:1 class mixture.
    pub fn mean_photon_number(&self) -> f64 {
        self.mu_signal * 6.0 / 8.0 + self.mu_decoy / 8.0 + self.mu_vacuum / 8.0
    }
}

/// Analytic per-gate click probability: `1 - exp(-eta mu) + 4 d`.
pub fn expected_click_prob(cfg: &OpticalConfig, class: PulseClass) -> f64 {
    1.0 - (-cfg.transmittance() * cfg.mu(class)).exp() + 4.0 * cfg.dark_count_per_gate
}

/// Expected click probability per emitted pulse, averaged over the class mixture.
pub fn expected_mixture_click_prob(cfg: &OpticalConfig) -> f64 {
    let w = [6.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0];
    PulseClass::ALL.iter().zip(w).map(|(c, w)| w * expected_click_prob(cfg, *c)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QberBudget {
    pub dark_contrib: f64,
    pub afterpulse_contrib: f64,
    pub crosstalk_contrib: f64,
}

impl QberBudget {
    pub fn total(&self) -> f64 {
        self.dark_contrib + self.afterpulse_contrib + self.crosstalk_contrib
    }
}

/// Error budget at `click_rate` clicks per emitted pulse.
///
/// Dark counts are charged as dark clicks over all clicks, without the 1/2
/// factor a random dark bit would carry; afterpulses are charged at half
/// their probability.
pub fn qber_budget(cfg: &OpticalConfig, click_rate: f64) -> Result<QberBudget, PhotonicsError> {
    if !(click_rate > 0.0) {
        return Err(PhotonicsError::DivisionByZero);
    }
    let dark_per_s = 4.0 * cfg.dark_count_per_gate * cfg.pulse_rate_hz;
    let clicks_per_s = click_rate * cfg.pulse_rate_hz;
    Ok(QberBudget {
        dark_contrib: dark_per_s / clicks_per_s,
        afterpulse_contrib: cfg.afterpulse_prob * 0.5,
        crosstalk_contrib: 1.0 / (cfg.crosstalk_extinction + 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cause {
    Photon,
    Dark,
    Afterpulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub slot_index: u64,
    pub basis: Basis,
    pub bit: bool,
    pub detector_id: u8,
    pub cause: Cause,
}

impl DetectionEvent {
    fn from_detector(slot_index: u64, detector_id: u8, cause: Cause) -> Self {
        Self {
            slot_index,
            basis: Basis::from_bit(detector_id & 0b10 != 0),
            bit: detector_id & 1 == 1,
            detector_id,
            cause,
        }
    }
}

fn poisson(mean: f64, rng: &mut EntropySource) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let u = rng.next_f64();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0;
    while u >= cdf && k < 1000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Poisson conditioned on at least one event.
fn poisson_nonzero(mean: f64, rng: &mut EntropySource) -> u32 {
    let e = (-mean).exp();
    let target = e + rng.next_f64() * (1.0 - e);
    let mut p = mean * e;
    let mut cdf = e + p;
    let mut k = 1;
    while target >= cdf && k < 1000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Bob's receiver: detectors plus the slowly varying channel state
/// (polarization extinction, gate alignment, pending afterpulse).
#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: OpticalConfig,
    transmittance: f64,
    extinction: f64,
    anchor_extinction: f64,
    anchor_time: f64,
    efficiency_scale: f64,
    pending_afterpulse: Option<u8>,
}

impl Receiver {
    pub fn new(cfg: OpticalConfig) -> Self {
        let ext = cfg.crosstalk_extinction;
        let mut rx = Self {
            transmittance: 0.0,
            extinction: ext,
            anchor_extinction: ext,
            anchor_time: 0.0,
            efficiency_scale: 1.0,
            pending_afterpulse: None,
            cfg,
        };
        rx.refresh();
        rx
    }

    fn refresh(&mut self) {
        self.transmittance = self.cfg.transmittance() * self.efficiency_scale;
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.cfg
    }

    pub fn extinction(&self) -> f64 {
        self.extinction
    }

    /// Lets polarization drift act up to simulated time `t` (seconds).
    pub fn advance_to(&mut self, t: f64) {
        let floor = EXTINCTION_FLOOR.min(self.anchor_extinction);
        let dt = (t - self.anchor_time).max(0.0);
        self.extinction = floor + (self.anchor_extinction - floor) * (-self.cfg.drift_rate * dt).exp();
    }

    /// Polarization feedback: extinction set to `target`, drift restarts at `t`.
    pub fn restore_extinction(&mut self, target: f64, t: f64) {
        self.anchor_extinction = target;
        self.anchor_time = t;
        self.extinction = target;
    }

    /// Multiplies detection efficiency, e.g. 0.1 for a misaligned gate.
    pub fn set_efficiency_scale(&mut self, scale: f64) {
        self.efficiency_scale = scale;
        self.refresh();
    }

    pub fn efficiency_scale(&self) -> f64 {
        self.efficiency_scale
    }

    /// Forgets any queued afterpulse, as at a frame boundary.
    pub fn clear_afterpulse(&mut self) {
        self.pending_afterpulse = None;
    }

    fn detector_for_photon(&self, desc: &PulseDescriptor, bob: Basis, rng: &mut EntropySource) -> u8 {
        let code = desc.polarization.code();
        if bob == desc.basis() {
            if rng.next_f64() < 1.0 / (self.extinction + 1.0) {
                code ^ 1
            } else {
                code
            }
        } else {
            ((bob.bit() as u8) << 1) | rng.take_bits(1) as u8
        }
    }

    fn photon_mask(&self, desc: &PulseDescriptor, detected: u32, rng: &mut EntropySource) -> u8 {
        if detected == 0 {
            return 0;
        }
        let bob = Basis::from_bit(rng.take_bits(1) == 1);
        let mut mask = 0;
        for _ in 0..detected {
            mask |= 1 << self.detector_for_photon(desc, bob, rng);
        }
        mask
    }

    fn resolve(
        &mut self,
        slot: u64,
        photon: u8,
        dark: u8,
        after: u8,
        rng: &mut EntropySource,
    ) -> Option<DetectionEvent> {
        let all = photon | dark | after;
        if all == 0 {
            return None;
        }
        let det = if all.count_ones() == 1 {
            all.trailing_zeros() as u8
        } else {
            // squash: random bit in the clicked basis, random basis if both clicked
            let (rect, diag) = (all & 0b0011 != 0, all & 0b1100 != 0);
            let basis = match (rect, diag) {
                (true, false) => 0,
                (false, true) => 1,
                _ => rng.take_bits(1) as u8,
            };
            (basis << 1) | rng.take_bits(1) as u8
        };
        let cause = if photon != 0 {
            Cause::Photon
        } else if dark != 0 {
            Cause::Dark
        } else {
            Cause::Afterpulse
        };
        if self.cfg.afterpulse_prob > 0.0 && rng.next_f64() < self.cfg.afterpulse_prob {
            self.pending_afterpulse = Some(det);
        }
        Some(DetectionEvent::from_detector(slot, det, cause))
    }

    fn dark_mask(&self, rng: &mut EntropySource) -> u8 {
        let d = self.cfg.dark_count_per_gate;
        if d <= 0.0 {
            return 0;
        }
        (0..4).fold(0, |m, i| if rng.next_f64() < d { m | (1 << i) } else { m })
    }

    /// Full per-gate simulation of one slot.
    pub fn simulate_slot(&mut self, desc: &PulseDescriptor, rng: &mut EntropySource) -> Option<DetectionEvent> {
        let after = self.pending_afterpulse.take().map_or(0, |d| 1 << d);
        let emitted = poisson(self.cfg.mu(desc.class), rng);
        let detected = (0..emitted).filter(|_| rng.next_f64() < self.transmittance).count() as u32;
        let photon = self.photon_mask(desc, detected, rng);
        let dark = self.dark_mask(rng);
        self.resolve(desc.slot_index, photon, dark, after, rng)
    }

    /// Probability that a gate of `class` clicks, afterpulses aside.
    pub fn click_prob(&self, class: PulseClass) -> f64 {
        let none_dark = (1.0 - self.cfg.dark_count_per_gate).powi(4);
        1.0 - (-self.transmittance * self.cfg.mu(class)).exp() * none_dark
    }

    /// One slot conditioned on at least one photon or dark click.
    fn forced_click(&mut self, desc: &PulseDescriptor, rng: &mut EntropySource) -> Option<DetectionEvent> {
        let lambda = self.transmittance * self.cfg.mu(desc.class);
        let photon_p = 1.0 - (-lambda).exp();
        let d = self.cfg.dark_count_per_gate;
        let none_dark = (1.0 - d).powi(4);
        let total = 1.0 - (1.0 - photon_p) * none_dark;
        if rng.next_f64() * total < photon_p {
            let k = poisson_nonzero(lambda, rng);
            let photon = self.photon_mask(desc, k, rng);
            let dark = self.dark_mask(rng);
            self.resolve(desc.slot_index, photon, dark, 0, rng)
        } else {
            // first dark detector i has weight (1-d)^i d; later ones independent
            let u = rng.next_f64() * (1.0 - none_dark);
            let mut acc = 0.0;
            let mut first = 3;
            for i in 0..4 {
                acc += (1.0 - d).powi(i) * d;
                if u < acc {
                    first = i as u8;
                    break;
                }
            }
            let mut dark = 1u8 << first;
            for j in first + 1..4 {
                if rng.next_f64() < d {
                    dark |= 1 << j;
                }
            }
            self.resolve(desc.slot_index, 0, dark, 0, rng)
        }
    }

    /// Event-driven simulation of the contiguous gates `slots`, statistically
    /// identical to calling [`simulate_slot`](Self::simulate_slot) on each.
    ///
    /// Candidate gates are drawn by geometric skipping at the largest class
    /// click probability and thinned to the actual class; only gates with a
    /// pending afterpulse are simulated in full. An afterpulse still pending
    /// at the end of the range is dropped (the low clocks carry no gate).
    pub fn simulate_range(
        &mut self,
        train: &PulseTrain,
        slots: std::ops::Range<u64>,
        rng: &mut EntropySource,
        out: &mut Vec<DetectionEvent>,
    ) {
        let p = PulseClass::ALL.map(|c| self.click_prob(c));
        let p_max = p.iter().copied().fold(0.0, f64::max);
        let log_q = (1.0 - p_max).ln();
        let mut s = slots.start;
        while s < slots.end {
            if self.pending_afterpulse.is_some() {
                let desc = train.at(s);
                out.extend(self.simulate_slot(&desc, rng));
                s += 1;
                continue;
            }
            if p_max <= 0.0 {
                break;
            }
            if p_max < 1.0 {
                let u = 1.0 - rng.next_f64();
                let gap = (u.ln() / log_q).floor();
                if gap >= (slots.end - s) as f64 {
                    break;
                }
                s += gap as u64;
            }
            let desc = train.at(s);
            if rng.next_f64() * p_max < p[desc.class.index()] {
                out.extend(self.forced_click(&desc, rng));
            }
            s += 1;
        }
        self.pending_afterpulse = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::Polarization;

    fn desc(class: PulseClass, polarization: Polarization, slot: u64) -> PulseDescriptor {
        PulseDescriptor { class, polarization, slot_index: slot }
    }

    #[test]
    fn default_config_is_valid_and_consistent() {
        let cfg = OpticalConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.mu_signal - 3.0 * cfg.mu_decoy).abs() < 1e-12);
        assert!((cfg.mean_photon_number() - 0.475).abs() < 1e-12);
        assert!((cfg.transmittance() - 0.021337).abs() < 1e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = OpticalConfig::default();
        cfg.detector_efficiency = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = OpticalConfig::default();
        cfg.fiber_loss_db = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn closed_form_click_probabilities() {
        let cfg = OpticalConfig::default();
        let eta = 10f64.powf(-0.45) * 10f64.powf(-0.3) * 0.12;
        assert!((expected_click_prob(&cfg, PulseClass::Signal) - (1.0 - (-0.6 * eta).exp() + 2e-5)).abs() < 1e-15);
        assert!((expected_click_prob(&cfg, PulseClass::Signal) - 0.01274).abs() < 1e-5);
        assert!((expected_click_prob(&cfg, PulseClass::Decoy) - 0.00428).abs() < 1e-5);
        assert!((expected_click_prob(&cfg, PulseClass::Vacuum) - 2e-5).abs() < 1e-15);
    }

    #[test]
    fn qber_budget_reproduces_reference_arithmetic() {
        let cfg = OpticalConfig::default();
        // 400 dark/s against 200 000 clicks/s
        let b = qber_budget(&cfg, 0.01).unwrap();
        assert!((b.dark_contrib - 0.002).abs() < 1e-15);
        assert!((b.afterpulse_contrib - 0.0005).abs() < 1e-15);
        let quiet = OpticalConfig { dark_count_per_gate: 0.0, afterpulse_prob: 0.0, ..cfg.clone() };
        let b = qber_budget(&quiet, 0.01).unwrap();
        assert!((b.total() - 1.0 / 151.0).abs() < 1e-15);
        assert_eq!(qber_budget(&cfg, 0.0), Err(PhotonicsError::DivisionByZero));
    }

    #[test]
    fn vacuum_without_dark_counts_never_clicks() {
        let cfg = OpticalConfig { dark_count_per_gate: 0.0, ..Default::default() };
        let mut rx = Receiver::new(cfg);
        let mut rng = EntropySource::new(1);
        for s in 0..100_000 {
            assert!(rx.simulate_slot(&desc(PulseClass::Vacuum, Polarization::H, s), &mut rng).is_none());
        }
    }

    #[test]
    fn noiseless_matched_basis_has_no_errors() {
        let cfg = OpticalConfig {
            dark_count_per_gate: 0.0,
            afterpulse_prob: 0.0,
            crosstalk_extinction: f64::INFINITY,
            mu_signal: 5.0,
            ..Default::default()
        };
        let mut rx = Receiver::new(cfg);
        let mut rng = EntropySource::new(2);
        let mut src = EntropySource::new(3);
        let (mut matched, mut mismatched, mut mismatch_err) = (0, 0, 0);
        for s in 0..200_000 {
            let d = desc(PulseClass::Signal, src.sample_polarization(), s);
            if let Some(ev) = rx.simulate_slot(&d, &mut rng) {
                if ev.basis == d.basis() {
                    matched += 1;
                    assert_eq!(ev.bit, d.bit());
                } else {
                    mismatched += 1;
                    mismatch_err += (ev.bit != d.bit()) as usize;
                }
            }
        }
        assert!(matched > 1000);
        let rate = mismatch_err as f64 / mismatched as f64;
        let sigma = (0.25 / mismatched as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * sigma, "{rate}");
    }

    #[test]
    fn detector_id_consistent_with_basis_and_bit() {
        let mut rx = Receiver::new(OpticalConfig { mu_signal: 2.0, dark_count_per_gate: 0.01, ..Default::default() });
        let mut rng = EntropySource::new(5);
        let train = PulseTrain::new(6);
        let mut events = Vec::new();
        rx.simulate_range(&train, 0..200_000, &mut rng, &mut events);
        assert!(!events.is_empty());
        for ev in &events {
            assert_eq!(Polarization::from_code(ev.detector_id).basis(), ev.basis);
            assert_eq!(Polarization::from_code(ev.detector_id).bit(), ev.bit);
        }
        assert!(events.windows(2).all(|w| w[0].slot_index < w[1].slot_index));
    }

    #[test]
    fn event_driven_path_matches_per_slot_path() {
        let cfg = OpticalConfig { afterpulse_prob: 0.05, dark_count_per_gate: 1e-4, ..Default::default() };
        let train = PulseTrain::new(10);
        let n = 2_000_000u64;

        let mut fast = Receiver::new(cfg.clone());
        let mut rng = EntropySource::new(11);
        let mut ev_fast = Vec::new();
        fast.simulate_range(&train, 0..n, &mut rng, &mut ev_fast);

        let mut slow = Receiver::new(cfg);
        let mut rng = EntropySource::new(12);
        let ev_slow: Vec<_> = (0..n).filter_map(|s| slow.simulate_slot(&train.at(s), &mut rng)).collect();

        let (a, b) = (ev_fast.len() as f64, ev_slow.len() as f64);
        // two independent binomial counts: difference within 4 sigma
        assert!((a - b).abs() < 4.0 * (a + b).sqrt(), "{a} vs {b}");
        let ap = |v: &[DetectionEvent]| v.iter().filter(|e| e.cause == Cause::Afterpulse).count() as f64;
        let (x, y) = (ap(&ev_fast), ap(&ev_slow));
        assert!((x - y).abs() < 4.0 * (x + y).sqrt() + 1.0, "{x} vs {y}");
    }

    #[test]
    fn drift_decays_toward_floor_and_feedback_restores() {
        let mut rx = Receiver::new(OpticalConfig { drift_rate: 1e-3, ..Default::default() });
        rx.advance_to(0.0);
        assert_eq!(rx.extinction(), 150.0);
        rx.advance_to(1000.0);
        let expect = EXTINCTION_FLOOR + 140.0 * (-1.0f64).exp();
        assert!((rx.extinction() - expect).abs() < 1e-9);
        rx.restore_extinction(150.0, 1000.0);
        rx.advance_to(1000.0);
        assert_eq!(rx.extinction(), 150.0);
    }
}
