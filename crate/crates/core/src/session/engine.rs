//! Per-endpoint protocol state machines. Alice is master: every simulated
//! second starts with her `TICK_CMD`, and she drives reconciliation and
//! privacy amplification. Bob hosts the channel and detector simulation.

use std::collections::VecDeque;
use std::ops::Range;

use crate::bits::BitString;
use crate::config::RunConfig;
use crate::entropy::{derive_seed, EntropySource, PulseClass, PulseDescriptor, PulseLookup, PulseTrain};
use crate::photonics::{Basis, DetectionEvent, Receiver};
use crate::privamp::{self, EcLeakage, PrivampError, SFactorInput, ToeplitzSpec};
use crate::reconcile::{self, wire as rw, AliceNext, AliceReconciler, BobReconciler, ReconcileError};
use crate::sifting::{self, Partition, Retain, SiftStats};
use crate::syncframe::{self, FrameFormat, Measurement};

use super::control::{ControlEvent, ControlState, Observation, QberWindow};
use super::keystore::{KeyBlockMeta, Keystore};
use super::report::{SessionReport, TickRecord};
use super::transport::{Link, Side};
use super::wire::{self, msg, AlignResult, Command, Port, RestartSync, SFactorAnnounce, TickCmd};
use super::SessionError;

pub(crate) const STREAM_ALICE: u64 = 1;
pub(crate) const STREAM_CHANNEL: u64 = 2;
pub(crate) const STREAM_TOEPLITZ: u64 = 3;

/// Most detections disclosed for one alignment.
const ALIGN_SAMPLE_MAX: usize = 20_000;

/// Maps simulated seconds onto (sampled) frames.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Clocking {
    pub fmt: FrameFormat,
    pub rate_hz: u64,
    pub sampling: u64,
}

impl Clocking {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { fmt: cfg.frame, rate_hz: cfg.optical.pulse_rate_hz.round() as u64, sampling: cfg.session.frame_sampling as u64 }
    }

    pub fn frame_range(&self, tick: u64) -> Range<u64> {
        let c = self.fmt.frame_clocks();
        tick * self.rate_hz / c..(tick + 1) * self.rate_hz / c
    }

    pub fn frames(&self, tick: u64) -> impl Iterator<Item = u64> {
        let r = self.frame_range(tick);
        (r.start.next_multiple_of(self.sampling)..r.end).step_by(self.sampling as usize)
    }

    pub fn signal_slots(&self, frame: u64) -> Range<u64> {
        let first = frame * self.fmt.frame_clocks();
        first..first + self.fmt.k_signal_clocks as u64
    }

    /// Whether `slot` is a signal clock of a simulated frame of `tick`.
    pub fn covers(&self, tick: u64, slot: u64) -> bool {
        let c = self.fmt.frame_clocks();
        let fr = slot / c;
        slot % c < self.fmt.k_signal_clocks as u64 && fr % self.sampling == 0 && self.frame_range(tick).contains(&fr)
    }
}

/// Alice's emissions restricted to one tick.
struct TickPulses<'a> {
    train: &'a PulseTrain,
    clk: Clocking,
    tick: u64,
}

impl PulseLookup for TickPulses<'_> {
    fn descriptor(&self, slot: u64) -> Option<PulseDescriptor> {
        self.clk.covers(self.tick, slot).then(|| self.train.at(slot))
    }
}

fn desync(e: impl std::fmt::Display) -> SessionError {
    SessionError::ProtocolDesync(e.to_string())
}

fn check_tick(got: u64, want: u64) -> Result<(), SessionError> {
    if got == want { Ok(()) } else { Err(desync(format!("message for tick {got} during tick {want}"))) }
}

fn encode_align_sample(tick: u64, meas: &[Measurement]) -> Vec<u8> {
    let mut out = tick.to_le_bytes().to_vec();
    out.extend((meas.len() as u32).to_le_bytes());
    for m in meas {
        out.extend(m.slot_index.to_le_bytes());
        out.push(m.basis.bit() as u8 | (m.bit as u8) << 1);
    }
    out
}

fn decode_align_sample(p: &[u8]) -> Result<(u64, Vec<Measurement>), SessionError> {
    let mut r = wire::Reader::new(p, "ALIGN_SAMPLE");
    let tick = r.u64()?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(ALIGN_SAMPLE_MAX));
    for _ in 0..n {
        let slot_index = r.u64()?;
        let b = r.u8()?;
        out.push(Measurement { slot_index, basis: Basis::from_bit(b & 1 == 1), bit: b & 2 != 0 });
    }
    r.finish()?;
    Ok((tick, out))
}

/// State both endpoints keep in lockstep.
pub(crate) struct Common {
    pub cfg: RunConfig,
    pub clk: Clocking,
    pub train: PulseTrain,
    pub window: QberWindow,
    sift_buf: BitString,
    corrected: VecDeque<reconcile::ReconciledKeyBlock>,
    pa_stats: SiftStats,
    pub next_block: u64,
    pub next_round: u64,
    pub committed: u64,
    pub keystore: Keystore,
    pub report: SessionReport,
    // per-tick counters
    t_sifted: u64,
    t_corrected: u64,
    t_final: u64,
    t_qber: Option<f64>,
}

impl Common {
    fn new(cfg: &RunConfig, side: Side) -> Self {
        let train = PulseTrain::new(derive_seed(cfg.session.seed, STREAM_ALICE));
        Self {
            clk: Clocking::new(cfg),
            train,
            window: QberWindow::new(cfg.control.qber_window_bits),
            sift_buf: BitString::new(),
            corrected: VecDeque::new(),
            pa_stats: SiftStats::default(),
            next_block: 0,
            next_round: 1,
            committed: 0,
            keystore: Keystore::new(),
            report: SessionReport::new(side, cfg),
            t_sifted: 0,
            t_corrected: 0,
            t_final: 0,
            t_qber: None,
            cfg: cfg.clone(),
        }
    }

    /// Drops every partially processed block.
    fn clear_inflight(&mut self) {
        self.sift_buf.clear();
        self.corrected.clear();
        self.pa_stats = SiftStats::default();
        self.window.reset();
    }

    fn block_bits(&self) -> usize {
        self.cfg.session.sift_block_bits
    }

    fn blocks_per_unit(&self) -> usize {
        self.cfg.privamp.unit_bits / self.block_bits()
    }

    fn take_block(&mut self) -> Option<BitString> {
        let b = self.block_bits();
        if self.sift_buf.len() < b {
            return None;
        }
        let rest = self.sift_buf.split_off(b);
        Some(std::mem::replace(&mut self.sift_buf, rest))
    }

    fn plan(&self) -> reconcile::Plan {
        self.cfg.reconcile.plan(self.window.estimate().unwrap_or(0.02))
    }

    /// Sample comparison of one tick, identical on both sides.
    fn absorb_sample(&mut self, tick_stats: &SiftStats, key: BitString) {
        self.pa_stats.merge(tick_stats);
        let s = tick_stats.class(PulseClass::Signal);
        self.window.push(s.compared, s.errors);
        self.t_qber = (self.window.compared() > 0).then(|| self.window.qber());
        self.t_sifted += key.len() as u64;
        self.report.totals.sifted_bits += key.len() as u64;
        self.report.totals.signal_compared += s.compared;
        self.report.totals.signal_errors += s.errors;
        self.sift_buf.extend_from_bitslice(&key);
    }

    fn block_done(&mut self, res: Result<reconcile::ReconciledKeyBlock, ReconcileError>, leaked: u64) -> Result<(), SessionError> {
        self.next_block += 1;
        self.report.totals.leaked_bits += leaked;
        match res {
            Ok(b) => {
                self.t_corrected += b.bits.len() as u64;
                self.report.totals.corrected_bits += b.bits.len() as u64;
                self.report.totals.blocks_ok += 1;
                self.corrected.push_back(b);
                Ok(())
            }
            Err(ReconcileError::CrcMismatch(_)) => {
                self.report.totals.blocks_failed += 1;
                Ok(())
            }
            Err(e) => Err(desync(e)),
        }
    }

    fn unit_ready(&self) -> bool {
        self.corrected.len() >= self.blocks_per_unit()
    }

    /// Key and disclosed bits of the oldest unit.
    fn unit(&self) -> (BitString, u64) {
        let mut key = BitString::with_capacity(self.cfg.privamp.unit_bits);
        let mut leak = 0;
        for b in self.corrected.iter().take(self.blocks_per_unit()) {
            key.extend_from_bitslice(&b.bits);
            leak += b.leaked_bits;
        }
        (key, leak)
    }

    fn consume_unit(&mut self) -> f64 {
        self.corrected.drain(..self.blocks_per_unit());
        let q = self.pa_stats.error_rate(PulseClass::Signal).unwrap_or(0.0);
        self.pa_stats = SiftStats::default();
        self.next_round += 1;
        q
    }

    fn record_tick(&mut self, tick: u64, command: Command) {
        let s = self.clk.sampling as f64;
        self.report.ticks.push(TickRecord {
            time_s: tick,
            qber: if command == Command::Run { self.t_qber } else { None },
            sifted_bps: self.t_sifted as f64 * s,
            corrected_bps: self.t_corrected as f64 * s,
            final_bps: self.t_final as f64 * s,
            mode: super::report::mode_name(command),
        });
        self.t_sifted = 0;
        self.t_corrected = 0;
        self.t_final = 0;
        self.t_qber = None;
    }

    fn commit(&mut self, round: u64, meta: KeyBlockMeta, key: &BitString) {
        self.t_final += key.len() as u64;
        self.report.totals.final_bits += key.len() as u64;
        self.report.totals.rounds += 1;
        self.report.sfactors.push(meta.sfactor);
        self.keystore.append(meta, key);
        self.committed = round;
    }
}

fn partition_stats(part: &Partition, mine: &BitString, theirs: &BitString) -> Result<SiftStats, SessionError> {
    let mut t = SiftStats::default();
    part.compare(mine, theirs, &mut t).map_err(desync)?;
    Ok(t)
}

pub struct AliceEngine {
    pub(crate) c: Common,
    pub control: ControlState,
    next_tick: u64,
    forced_restart_done: bool,
}

impl AliceEngine {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            c: Common::new(cfg, Side::Alice),
            control: ControlState::new(cfg.control.clone()),
            next_tick: 0,
            forced_restart_done: false,
        }
    }

    pub fn into_report(mut self) -> SessionReport {
        self.c.report.feedback_events = self.control.feedback_events;
        self.c.report.keystore = std::mem::take(&mut self.c.keystore);
        self.c.report
    }

    fn event(&mut self, tick: u64, ev: Option<ControlEvent>) {
        if let Some(ev) = ev {
            log::info!("t={tick}s control: {ev:?}");
            if ev == ControlEvent::Restart {
                self.c.report.totals.restarts += 1;
            }
            self.c.report.events.push((tick, ev));
        }
    }

    fn resync(&mut self, link: &Link) -> Result<(), SessionError> {
        let mine = RestartSync {
            tick: self.next_tick,
            committed: self.c.committed,
            next_block: self.c.next_block,
            next_round: self.c.next_round,
        };
        link.send(Port::CommandDown, msg::RESTART_SYNC, mine.encode())?;
        let theirs = RestartSync::decode(&link.expect(Port::EcUp, msg::RESTART_SYNC)?)?;
        if theirs != mine {
            return Err(SessionError::Divergence(format!("alice {mine:?} vs bob {theirs:?}")));
        }
        self.c.clear_inflight();
        self.control.realign = true;
        Ok(())
    }

    /// Runs until the session ends or the link fails. Safe to call again
    /// with a fresh link after a recoverable error.
    pub fn run_link(&mut self, link: &Link) -> Result<(), SessionError> {
        self.resync(link)?;
        let duration = self.c.cfg.session.duration_s;
        loop {
            let tick = self.next_tick;
            if tick >= duration {
                let cmd = TickCmd { tick, command: Command::Stop, committed: self.c.committed };
                link.send(Port::CommandDown, msg::TICK_CMD, cmd.encode())?;
                let fin = RestartSync::decode(&link.expect(Port::EcUp, msg::RESTART_SYNC)?)?;
                if fin.committed != self.c.committed {
                    return Err(SessionError::Divergence("final commit mismatch".into()));
                }
                return Ok(());
            }
            // a tick cut short by a failure is abandoned, not replayed
            self.next_tick += 1;
            if self.c.cfg.session.faults.force_restart_at_s == Some(tick) && !self.forced_restart_done {
                self.forced_restart_done = true;
                log::warn!("fault injection: forced restart at t={tick}s");
                let ev = self.control.restart();
                self.event(tick, Some(ev));
            }
            let command = self.control.command();
            link.send(Port::CommandDown, msg::TICK_CMD, TickCmd { tick, command, committed: self.c.committed }.encode())?;
            let ev = match command {
                Command::Run => {
                    let obs = self.run_tick(link, tick)?;
                    self.control.step(Some(&obs))
                }
                Command::Realign => {
                    let ok = self.align_tick(link, tick)?;
                    self.control.alignment_done(ok)
                }
                Command::Feedback { .. } | Command::Pause { .. } => {
                    self.c.window.reset();
                    self.control.step(None)
                }
                Command::Restart => {
                    self.c.clear_inflight();
                    self.control.step(None)
                }
                Command::Stop => unreachable!(),
            };
            self.event(tick, ev);
            self.c.record_tick(tick, command);
        }
    }

    fn align_tick(&mut self, link: &Link, tick: u64) -> Result<bool, SessionError> {
        let (t, meas) = decode_align_sample(&link.expect(Port::SiftUp, msg::ALIGN_SAMPLE)?)?;
        check_tick(t, tick)?;
        let pulses = TickPulses { train: &self.c.train, clk: self.c.clk, tick };
        let offset = match syncframe::align_offset(&meas, &pulses, self.c.cfg.session.align_search_range) {
            Ok(a) => {
                log::info!("t={tick}s aligned at offset {} (qber {:.4})", a.offset, a.qber);
                Some(a.offset)
            }
            Err(e) => {
                log::warn!("t={tick}s alignment failed: {e}");
                None
            }
        };
        link.send(Port::SiftDown, msg::ALIGN_RESULT, AlignResult { tick, offset }.encode())?;
        Ok(offset.is_some())
    }

    fn run_tick(&mut self, link: &Link, tick: u64) -> Result<Observation, SessionError> {
        let fmt = self.c.clk.fmt;
        let (t, body) = wire::decode_tagged(&link.expect(Port::SiftUp, msg::BASIS_LOC)?, "BASIS_LOC").map(|(t, b)| (t, b.to_vec()))?;
        check_tick(t, tick)?;
        let announced = sifting::decode_announcement(&body, &fmt).map_err(desync)?;
        let pulses = TickPulses { train: &self.c.train, clk: self.c.clk, tick };
        let (verdicts, detected) = sifting::alice_retain(&announced, &pulses).map_err(desync)?;
        link.send(Port::SiftDown, msg::RETAIN, wire::encode_tagged(tick, &sifting::encode_retain(&verdicts)))?;

        let bits: Vec<bool> = announced.iter().map(|&(s, _)| self.c.train.at(s).bit()).collect();
        let part = sifting::partition(&verdicts, sifting::DEFAULT_SAMPLE_STRIDE);
        let mine = part.disclosure(&bits);
        link.send(Port::SiftDown, msg::SAMPLE_DISCLOSE, wire::encode_bits(tick, &mine))?;
        let (t, theirs) = wire::decode_bits(&link.expect(Port::SiftUp, msg::SAMPLE_DISCLOSE)?, "SAMPLE_DISCLOSE")?;
        check_tick(t, tick)?;

        let mut st = partition_stats(&part, &mine, &theirs)?;
        let mut emitted = [0u64; 3];
        for fr in self.c.clk.frames(tick) {
            let cc = self.c.train.class_counts(self.c.clk.signal_slots(fr));
            (0..3).for_each(|i| emitted[i] += cc[i]);
        }
        for c in PulseClass::ALL {
            st.classes[c.index()].emitted = emitted[c.index()];
            st.classes[c.index()].detected = detected[c.index()];
        }
        self.c.absorb_sample(&st, part.key_bits(&bits));

        while let Some(key) = self.c.take_block() {
            self.reconcile_block(link, key)?;
        }
        while self.c.unit_ready() {
            if !self.amplify(link, tick)? {
                break;
            }
        }
        Ok(Observation {
            qber: self.c.window.qber(),
            window_full: self.c.window.is_full(),
            clicks: announced.len() as u64,
            emitted: emitted.iter().sum(),
        })
    }

    fn reconcile_block(&mut self, link: &Link, key: BitString) -> Result<(), SessionError> {
        let id = self.c.next_block;
        let mut r = AliceReconciler::new(id, &key, self.c.plan(), self.c.cfg.reconcile.permutation_seed_base).map_err(desync)?;
        link.send(Port::CommandDown, msg::PARITY_VEC, rw::encode_parity(&r.start()))?;
        loop {
            let req = rw::decode_request(&link.expect(Port::EcUp, msg::SYNDROME_REQ)?).map_err(desync)?;
            let (rsp, next) = r.on_request(&req).map_err(desync)?;
            link.send(Port::CommandDown, msg::SYNDROME_RSP, rw::encode_response(&rsp))?;
            match next {
                AliceNext::Parity(p) => link.send(Port::CommandDown, msg::PARITY_VEC, rw::encode_parity(&p))?,
                AliceNext::Crc(c) => {
                    link.send(Port::CommandDown, msg::CRC_CHECK, rw::encode_crc(&c))?;
                    break;
                }
            }
        }
        let v = rw::decode_verdict(&link.expect(Port::EcUp, msg::BLOCK_VERDICT)?).map_err(desync)?;
        let leaked = r.leaked_bits();
        let res = r.on_verdict(&v);
        if let Err(e) = &res {
            log::info!("block {id} discarded: {e}");
        }
        self.c.block_done(res, leaked)
    }

    /// One privacy-amplification round; false if deferred for statistics.
    fn amplify(&mut self, link: &Link, tick: u64) -> Result<bool, SessionError> {
        let round = self.c.next_round;
        let (key, leak) = self.c.unit();
        let n = key.len();
        let pa = &self.c.cfg.privamp;
        let input = SFactorInput::from_stats(
            &self.c.pa_stats,
            self.c.cfg.optical.mu_signal,
            self.c.cfg.optical.mu_decoy,
            pa.confidence_sigmas,
            EcLeakage::Measured { leaked_bits: leak, n: n as u64 },
        );
        let sfactor = match privamp::compute_sfactor(&input) {
            Ok(s) => s,
            Err(PrivampError::InsufficientStatistics(d)) => {
                log::debug!("round {round} deferred: {d} decoy detections");
                let defer = SFactorAnnounce { round, n: 0, m: 0, sfactor: 0.0 };
                link.send(Port::CommandDown, msg::SFACTOR_ANNOUNCE, defer.encode())?;
                return Ok(false);
            }
            Err(e) => {
                log::warn!("round {round}: {e}; unit yields no key");
                0.0
            }
        };
        let m = privamp::final_key_length(n, sfactor);
        let ann = SFactorAnnounce { round, n: n as u32, m: m as u32, sfactor };
        link.send(Port::CommandDown, msg::SFACTOR_ANNOUNCE, ann.encode())?;
        let qber = self.c.consume_unit();
        if m == 0 {
            return Ok(true);
        }
        let seed = derive_seed(derive_seed(self.c.cfg.session.seed, STREAM_TOEPLITZ), round);
        link.send(Port::CommandDown, msg::TOEPLITZ_SEED, wire::encode_pair(round, seed))?;
        let spec = ToeplitzSpec::random(n, m, seed).map_err(desync)?;
        let fin = privamp::toeplitz_hash(&key, &spec).map_err(desync)?;
        let (r, len) = wire::decode_pair(&link.expect(Port::EcUp, msg::KEY_ACK)?, "KEY_ACK")?;
        if (r, len) != (round, m as u64) {
            return Err(desync(format!("KEY_ACK for round {r} ({len} bits), expected {round} ({m})")));
        }
        let meta = KeyBlockMeta { block_id: round, length: m as u64, sfactor, qber, timestamp: (tick + 1) as f64 };
        self.c.commit(round, meta, &fin);
        log::info!("t={tick}s round {round}: {m} final bits (sfactor {sfactor:.4})");
        Ok(true)
    }
}

pub struct BobEngine {
    pub(crate) c: Common,
    rx: Receiver,
    offset: Option<i64>,
    pending: Vec<(u64, KeyBlockMeta, BitString)>,
    slipped: bool,
}

impl BobEngine {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { c: Common::new(cfg, Side::Bob), rx: Receiver::new(cfg.optical.clone()), offset: None, pending: Vec::new(), slipped: false }
    }

    pub fn into_report(mut self) -> SessionReport {
        self.c.report.keystore = std::mem::take(&mut self.c.keystore);
        self.c.report
    }

    fn commit_upto(&mut self, committed: u64) {
        let (done, keep): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|p| p.0 <= committed);
        for (round, meta, key) in done {
            self.c.commit(round, meta, &key);
        }
        self.pending = keep;
    }

    fn state(&self) -> RestartSync {
        RestartSync { tick: 0, committed: self.c.committed, next_block: self.c.next_block, next_round: self.c.next_round }
    }

    fn resync(&mut self, link: &Link) -> Result<(), SessionError> {
        let a = RestartSync::decode(&link.expect(Port::CommandDown, msg::RESTART_SYNC)?)?;
        self.commit_upto(a.committed);
        if !self.pending.is_empty() {
            log::info!("discarding {} unconfirmed final-key rounds", self.pending.len());
            self.pending.clear();
        }
        if self.c.committed != a.committed {
            return Err(SessionError::Divergence(format!("bob committed {} but alice {}", self.c.committed, a.committed)));
        }
        self.c.next_block = a.next_block;
        self.c.next_round = a.next_round;
        self.c.clear_inflight();
        link.send(Port::EcUp, msg::RESTART_SYNC, RestartSync { tick: a.tick, ..self.state() }.encode())?;
        Ok(())
    }

    pub fn run_link(&mut self, link: &Link) -> Result<(), SessionError> {
        self.resync(link)?;
        loop {
            let cmd = TickCmd::decode(&link.expect(Port::CommandDown, msg::TICK_CMD)?)?;
            self.commit_upto(cmd.committed);
            let tick = cmd.tick;
            match cmd.command {
                Command::Stop => {
                    link.send(Port::EcUp, msg::RESTART_SYNC, RestartSync { tick, ..self.state() }.encode())?;
                    return Ok(());
                }
                Command::Run => self.run_tick(link, tick)?,
                Command::Realign => self.align_tick(link, tick)?,
                Command::Feedback { last } => {
                    self.c.window.reset();
                    if last {
                        self.rx.restore_extinction(self.c.cfg.control.feedback_target_extinction, (tick + 1) as f64);
                    }
                }
                Command::Pause { last } => {
                    self.c.window.reset();
                    if last {
                        self.rx.set_efficiency_scale(1.0);
                    }
                }
                Command::Restart => self.c.clear_inflight(),
            }
            self.c.record_tick(tick, cmd.command);
        }
    }

    /// Detections of one tick with Bob's (unaligned) slot numbering.
    fn detect(&mut self, tick: u64) -> Vec<(i64, Basis, bool)> {
        let faults = &self.c.cfg.session.faults;
        if faults.gate_slip_at_s.is_some_and(|t| tick >= t) && !self.slipped {
            self.slipped = true;
            log::warn!("fault injection: gate slip at t={tick}s");
            self.rx.set_efficiency_scale(0.1);
        }
        self.rx.advance_to(tick as f64 + 0.5);
        let chan = derive_seed(self.c.cfg.session.seed, STREAM_CHANNEL);
        let shift = self.c.cfg.session.sync_offset_slots;
        let mut events: Vec<DetectionEvent> = Vec::new();
        for fr in self.c.clk.frames(tick) {
            let mut rng = EntropySource::new(derive_seed(chan, fr));
            self.rx.simulate_range(&self.c.train, self.c.clk.signal_slots(fr), &mut rng, &mut events);
        }
        events.iter().map(|e| (e.slot_index as i64 + shift, e.basis, e.bit)).collect()
    }

    fn align_tick(&mut self, link: &Link, tick: u64) -> Result<(), SessionError> {
        let meas: Vec<Measurement> = self
            .detect(tick)
            .into_iter()
            .filter(|d| d.0 >= 0)
            .take(ALIGN_SAMPLE_MAX)
            .map(|(s, basis, bit)| Measurement { slot_index: s as u64, basis, bit })
            .collect();
        link.send(Port::SiftUp, msg::ALIGN_SAMPLE, encode_align_sample(tick, &meas))?;
        let res = AlignResult::decode(&link.expect(Port::SiftDown, msg::ALIGN_RESULT)?)?;
        check_tick(res.tick, tick)?;
        if res.offset.is_some() {
            self.offset = res.offset;
        }
        Ok(())
    }

    fn run_tick(&mut self, link: &Link, tick: u64) -> Result<(), SessionError> {
        let offset = self.offset.ok_or_else(|| desync("key tick before alignment"))?;
        let clk = self.c.clk;
        let meas: Vec<Measurement> = self
            .detect(tick)
            .into_iter()
            .map(|(s, basis, bit)| (s - offset, basis, bit))
            .filter(|&(s, _, _)| s >= 0 && clk.covers(tick, s as u64))
            .map(|(s, basis, bit)| Measurement { slot_index: s as u64, basis, bit })
            .collect();
        let fmt = clk.fmt;
        link.send(Port::SiftUp, msg::BASIS_LOC, wire::encode_tagged(tick, &sifting::encode_announcement(&meas, &fmt)))?;
        let payload = link.expect(Port::SiftDown, msg::RETAIN)?;
        let (t, body) = wire::decode_tagged(&payload, "RETAIN")?;
        check_tick(t, tick)?;
        let verdicts = sifting::decode_retain(body, meas.len()).map_err(desync)?;

        let bits: Vec<bool> = meas.iter().map(|m| m.bit).collect();
        let part = sifting::partition(&verdicts, sifting::DEFAULT_SAMPLE_STRIDE);
        let mine = part.disclosure(&bits);
        link.send(Port::SiftUp, msg::SAMPLE_DISCLOSE, wire::encode_bits(tick, &mine))?;
        let (t, theirs) = wire::decode_bits(&link.expect(Port::SiftDown, msg::SAMPLE_DISCLOSE)?, "SAMPLE_DISCLOSE")?;
        check_tick(t, tick)?;

        let mut st = partition_stats(&part, &mine, &theirs)?;
        for v in &verdicts {
            if let Retain::Keep(c) = v {
                st.classes[c.index()].detected += 1;
            }
        }
        self.c.absorb_sample(&st, part.key_bits(&bits));

        while let Some(key) = self.c.take_block() {
            self.reconcile_block(link, key)?;
        }
        while self.c.unit_ready() {
            if !self.amplify(link, tick)? {
                break;
            }
        }
        Ok(())
    }

    fn reconcile_block(&mut self, link: &Link, key: BitString) -> Result<(), SessionError> {
        let id = self.c.next_block;
        let mut r = BobReconciler::new(id, &key, self.c.plan(), self.c.cfg.reconcile.permutation_seed_base).map_err(desync)?;
        let mut m = link.recv(Port::CommandDown)?;
        let mut leaked = 0u64;
        let crc = loop {
            match m.msg_type {
                msg::PARITY_VEC => {
                    let pv = rw::decode_parity(&m.payload).map_err(desync)?;
                    leaked += pv.parities.len() as u64;
                    link.send(Port::EcUp, msg::SYNDROME_REQ, rw::encode_request(&r.on_parity(&pv).map_err(desync)?))?;
                    let rsp = rw::decode_response(&link.expect(Port::CommandDown, msg::SYNDROME_RSP)?).map_err(desync)?;
                    leaked += rsp.bits_per_syndrome as u64 * rsp.syndromes.len() as u64;
                    r.on_response(&rsp).map_err(desync)?;
                }
                msg::CRC_CHECK => break rw::decode_crc(&m.payload).map_err(desync)?,
                t => return Err(desync(format!("unexpected {} during reconciliation", msg::name(t)))),
            }
            m = link.recv(Port::CommandDown)?;
        };
        let (verdict, res) = r.on_crc(&crc);
        link.send(Port::EcUp, msg::BLOCK_VERDICT, rw::encode_verdict(&verdict))?;
        self.c.block_done(res, leaked + 32)
    }

    fn amplify(&mut self, link: &Link, tick: u64) -> Result<bool, SessionError> {
        let ann = SFactorAnnounce::decode(&link.expect(Port::CommandDown, msg::SFACTOR_ANNOUNCE)?)?;
        let round = self.c.next_round;
        if ann.round != round {
            return Err(desync(format!("announce for round {} but expected {round}", ann.round)));
        }
        if ann.n == 0 {
            return Ok(false);
        }
        let (key, _) = self.c.unit();
        if ann.n as usize != key.len() || ann.m > ann.n {
            return Err(desync("amplification unit size disagrees"));
        }
        let qber = self.c.consume_unit();
        if ann.m == 0 {
            return Ok(true);
        }
        let (r, seed) = wire::decode_pair(&link.expect(Port::CommandDown, msg::TOEPLITZ_SEED)?, "TOEPLITZ_SEED")?;
        if r != round {
            return Err(desync("seed for another round"));
        }
        let spec = ToeplitzSpec::random(key.len(), ann.m as usize, seed).map_err(desync)?;
        let fin = privamp::toeplitz_hash(&key, &spec).map_err(desync)?;
        let meta = KeyBlockMeta {
            block_id: round,
            length: ann.m as u64,
            sfactor: ann.sfactor,
            qber,
            timestamp: (tick + 1) as f64,
        };
        self.pending.push((round, meta, fin));
        link.send(Port::EcUp, msg::KEY_ACK, wire::encode_pair(round, ann.m as u64))?;
        Ok(true)
    }
}
