//! Key-extraction supervisor: QBER and click-rate monitoring with
//! polarization feedback, delay-adjust pauses and restarts.

use std::collections::VecDeque;

use serde::Serialize;

use crate::config::ControlConfig;

use super::wire::Command;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Running,
    PolarizationFeedback,
    DelayAdjustPause,
    Restarting,
}

/// Rolling error rate over the most recent sampled bits, kept in whole ticks.
#[derive(Debug, Clone)]
pub struct QberWindow {
    span: u64,
    ticks: VecDeque<(u64, u64)>,
    compared: u64,
    errors: u64,
    last: Option<f64>,
}

impl QberWindow {
    pub fn new(span: u64) -> Self {
        Self { span, ticks: VecDeque::new(), compared: 0, errors: 0, last: None }
    }

    pub fn push(&mut self, compared: u64, errors: u64) {
        self.ticks.push_back((compared, errors));
        self.compared += compared;
        self.errors += errors;
        while let Some(&(c, e)) = self.ticks.front() {
            if self.compared - c < self.span {
                break;
            }
            self.compared -= c;
            self.errors -= e;
            self.ticks.pop_front();
        }
        if self.compared > 0 {
            self.last = Some(self.qber());
        }
    }

    pub fn is_full(&self) -> bool {
        self.compared >= self.span
    }

    pub fn compared(&self) -> u64 {
        self.compared
    }

    pub fn qber(&self) -> f64 {
        if self.compared == 0 { self.last.unwrap_or(0.0) } else { self.errors as f64 / self.compared as f64 }
    }

    /// Most recent estimate, surviving a reset.
    pub fn estimate(&self) -> Option<f64> {
        self.last
    }

    pub fn reset(&mut self) {
        self.ticks.clear();
        self.compared = 0;
        self.errors = 0;
    }
}

/// What one key-producing tick showed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Observation {
    /// Rolling signal QBER and whether its window is full.
    pub qber: f64,
    pub window_full: bool,
    pub clicks: u64,
    pub emitted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ControlEvent {
    FeedbackStarted,
    FeedbackFailed,
    DelayAdjust,
    Restart,
}

#[derive(Debug, Clone)]
pub struct ControlState {
    pub mode: Mode,
    cfg: ControlConfig,
    /// Ticks left in the current feedback or pause.
    remaining: u32,
    click_baseline: Option<f64>,
    baseline_samples: Vec<f64>,
    awaiting_check: bool,
    feedback_failures: u32,
    /// The next key-producing tick must first re-align.
    pub realign: bool,
    pub feedback_events: u32,
}

const BASELINE_TICKS: usize = 3;

impl ControlState {
    pub fn new(cfg: ControlConfig) -> Self {
        Self {
            mode: Mode::Running,
            cfg,
            remaining: 0,
            click_baseline: None,
            baseline_samples: Vec::new(),
            awaiting_check: false,
            feedback_failures: 0,
            realign: true,
            feedback_events: 0,
        }
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    pub fn click_baseline(&self) -> Option<f64> {
        self.click_baseline
    }

    /// Command for the coming tick.
    pub fn command(&self) -> Command {
        match self.mode {
            Mode::Running if self.realign => Command::Realign,
            Mode::Running => Command::Run,
            Mode::PolarizationFeedback => Command::Feedback { last: self.remaining <= 1 },
            Mode::DelayAdjustPause => Command::Pause { last: self.remaining <= 1 },
            Mode::Restarting => Command::Restart,
        }
    }

    /// Forces a restart, e.g. after an alignment failure or a fault.
    pub fn restart(&mut self) -> ControlEvent {
        self.mode = Mode::Restarting;
        ControlEvent::Restart
    }

    pub fn alignment_done(&mut self, ok: bool) -> Option<ControlEvent> {
        if ok {
            self.realign = false;
            None
        } else {
            Some(self.restart())
        }
    }

    /// Advances one tick. `obs` is present only for ticks that produced key.
    pub fn step(&mut self, obs: Option<&Observation>) -> Option<ControlEvent> {
        match self.mode {
            Mode::Running => obs.and_then(|o| self.running(o)),
            Mode::PolarizationFeedback | Mode::DelayAdjustPause => {
                self.remaining = self.remaining.saturating_sub(1);
                if self.remaining == 0 {
                    if self.mode == Mode::DelayAdjustPause {
                        self.realign = true;
                    } else {
                        self.awaiting_check = true;
                    }
                    self.mode = Mode::Running;
                }
                None
            }
            Mode::Restarting => {
                self.mode = Mode::Running;
                self.realign = true;
                self.awaiting_check = false;
                self.feedback_failures = 0;
                None
            }
        }
    }

    fn running(&mut self, o: &Observation) -> Option<ControlEvent> {
        if o.emitted > 0 {
            let rate = o.clicks as f64 / o.emitted as f64;
            match self.click_baseline {
                None => {
                    self.baseline_samples.push(rate);
                    if self.baseline_samples.len() == BASELINE_TICKS {
                        self.click_baseline = Some(self.baseline_samples.iter().sum::<f64>() / BASELINE_TICKS as f64);
                    }
                }
                Some(base) if (rate - base).abs() > self.cfg.click_rate_deviation * base => {
                    self.mode = Mode::DelayAdjustPause;
                    self.remaining = self.cfg.delay_adjust_duration_s.max(1);
                    return Some(ControlEvent::DelayAdjust);
                }
                Some(_) => {}
            }
        }
        if !o.window_full {
            return None;
        }
        if o.qber == 0.0 && o.clicks > 0 {
            return Some(self.restart());
        }
        if o.qber > self.cfg.qber_threshold {
            if self.awaiting_check {
                self.feedback_failures += 1;
                if self.feedback_failures >= self.cfg.max_feedback_failures {
                    return Some(self.restart());
                }
            }
            self.mode = Mode::PolarizationFeedback;
            self.remaining = self.cfg.feedback_duration_s.max(1);
            self.feedback_events += 1;
            self.awaiting_check = false;
            return Some(if self.feedback_failures > 0 { ControlEvent::FeedbackFailed } else { ControlEvent::FeedbackStarted });
        }
        self.awaiting_check = false;
        self.feedback_failures = 0;
        None
    }
}

/// One transition of the supervisor: the state after observing `obs`.
pub fn run_control(mut state: ControlState, obs: Option<&Observation>) -> (ControlState, Option<ControlEvent>) {
    let ev = state.step(obs);
    (state, ev)
}
