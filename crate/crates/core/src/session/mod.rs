//! Two-endpoint orchestration: transport, control loop, key storage and
//! the simulated-time drivers.

pub mod control;
mod engine;
pub mod keystore;
pub mod report;
pub mod transport;
pub mod wire;

use std::sync::mpsc;
use std::time::Duration;

use thiserror::Error;

use crate::config::{RunConfig, TransportKind};

pub use control::{run_control, ControlEvent, ControlState, Mode, Observation, QberWindow};
pub use engine::{AliceEngine, BobEngine};
pub use keystore::{KeyBlockMeta, Keystore};
pub use report::{SessionReport, Summary, TickRecord, Totals};
pub use transport::{Link, LinkConfig, LoggedMessage, MessageLog, Side};
pub use wire::{ClassicalMessage, Command, Port};

/// Link failures tolerated per session before giving up.
pub const MAX_LINK_FAILURES: u64 = 20;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("peer timed out")]
    PeerTimeout,
    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("protocol desync: {0}")]
    ProtocolDesync(String),
    #[error("key exhausted: need {needed} bits, {available} available")]
    KeyExhausted { needed: u64, available: u64 },
    #[error("key bits {start}..{end} already consumed")]
    KeyReuse { start: u64, end: u64 },
    #[error("corrupt key store: {0}")]
    Corrupt(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("endpoints diverged: {0}")]
    Divergence(String),
    #[error("giving up after {0} link failures")]
    TooManyFailures(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SessionError {
    /// Errors cured by reconnecting and resynchronizing.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, SessionError::TransportFailure(_) | SessionError::ProtocolDesync(_))
    }
}

impl From<wire::WireError> for SessionError {
    fn from(e: wire::WireError) -> Self {
        SessionError::ProtocolDesync(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
    Loopback,
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alice" => Ok(Role::Alice),
            "bob" => Ok(Role::Bob),
            "loopback" => Ok(Role::Loopback),
            _ => Err(format!("unknown role {s:?} (alice|bob|loopback)")),
        }
    }
}

/// Reports of whichever endpoints ran in this process.
#[derive(Debug)]
pub struct SessionOutcome {
    pub alice: Option<SessionReport>,
    pub bob: Option<SessionReport>,
}

fn check_config(cfg: &RunConfig) -> Result<(), SessionError> {
    cfg.validate().map_err(|e| SessionError::Config(e.to_string()))?;
    let frames = cfg.session.duration_s as f64 * cfg.optical.pulse_rate_hz / cfg.frame.frame_clocks() as f64;
    if frames >= u32::MAX as f64 {
        return Err(SessionError::Config("duration exceeds the 32-bit frame counter".into()));
    }
    Ok(())
}

fn link_config(cfg: &RunConfig, side: Side, attempt: u64, log: &Option<MessageLog>) -> LinkConfig {
    let s = &cfg.session;
    let rto = match s.transport {
        TransportKind::Loopback => Duration::from_millis((s.retransmit_timeout_ms / 10).max(1)),
        TransportKind::Tcp => Duration::from_millis(s.retransmit_timeout_ms),
    };
    LinkConfig {
        side,
        retransmit_timeout: rto,
        peer_timeout: Duration::from_millis(s.peer_timeout_ms),
        corrupt_every: s.faults.corrupt_every,
        kill_after: if side == Side::Alice && attempt == 0 { s.faults.kill_after_messages } else { None },
        log: log.clone(),
    }
}

/// Drives one endpoint across link failures. `connect` yields a fresh link
/// per attempt.
fn supervise<E>(
    engine: &mut E,
    mut connect: impl FnMut(u64) -> Result<Link, SessionError>,
    run: impl Fn(&mut E, &Link) -> Result<(), SessionError>,
    totals: impl Fn(&mut E) -> &mut Totals,
) -> Result<(), SessionError> {
    use std::sync::atomic::Ordering::Relaxed;
    let mut attempt = 0;
    loop {
        let mut link = connect(attempt)?;
        attempt += 1;
        let res = run(engine, &link);
        link.close();
        let t = totals(engine);
        t.frames_dropped += link.counters().crc_errors.load(Relaxed);
        t.frames_retransmitted += link.counters().retransmitted.load(Relaxed);
        match res {
            Ok(()) => return Ok(()),
            Err(e) if e.is_recoverable() => {
                log::warn!("{:?}: {e}; reconnecting", link.side());
                t.link_failures += 1;
                if t.link_failures >= MAX_LINK_FAILURES {
                    return Err(SessionError::TooManyFailures(t.link_failures));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Both endpoints in one process over in-memory links.
pub fn run_loopback(cfg: &RunConfig, log: Option<MessageLog>) -> Result<(SessionReport, SessionReport), SessionError> {
    check_config(cfg)?;
    let (tx, rx) = mpsc::channel::<Link>();
    let bob_cfg = cfg.clone();
    let peer_timeout = Duration::from_millis(cfg.session.peer_timeout_ms);
    let bob = std::thread::Builder::new()
        .name("bob".into())
        .spawn(move || {
            let mut bob = BobEngine::new(&bob_cfg);
            supervise(
                &mut bob,
                |_| rx.recv_timeout(peer_timeout).map_err(|_| SessionError::PeerTimeout),
                |b, l| b.run_link(l),
                |b| &mut b.c.report.totals,
            )
            .map(|()| bob.into_report())
        })
        .expect("spawn bob");
    let mut alice = AliceEngine::new(cfg);
    let res = supervise(
        &mut alice,
        |attempt| {
            let (a, b) = Link::loopback_pair(
                link_config(cfg, Side::Alice, attempt, &log),
                link_config(cfg, Side::Bob, attempt, &log),
            );
            tx.send(b).map_err(|_| SessionError::TransportFailure("bob exited".into()))?;
            Ok(a)
        },
        |a, l| a.run_link(l),
        |a| &mut a.c.report.totals,
    );
    drop(tx);
    let bob_res = bob.join().map_err(|_| SessionError::TransportFailure("bob panicked".into()))?;
    res?;
    Ok((alice.into_report(), bob_res?))
}

pub fn run_alice_tcp(cfg: &RunConfig, log: Option<MessageLog>) -> Result<SessionReport, SessionError> {
    check_config(cfg)?;
    let listener = transport::tcp_listen(&cfg.session.listen)?;
    let timeout = Duration::from_millis(cfg.session.peer_timeout_ms);
    let mut alice = AliceEngine::new(cfg);
    supervise(
        &mut alice,
        |attempt| Link::over_tcp(transport::tcp_accept(&listener, timeout)?, link_config(cfg, Side::Alice, attempt, &log)),
        |a, l| a.run_link(l),
        |a| &mut a.c.report.totals,
    )?;
    Ok(alice.into_report())
}

pub fn run_bob_tcp(cfg: &RunConfig, log: Option<MessageLog>) -> Result<SessionReport, SessionError> {
    check_config(cfg)?;
    let timeout = Duration::from_millis(cfg.session.peer_timeout_ms);
    let mut bob = BobEngine::new(cfg);
    supervise(
        &mut bob,
        |attempt| Link::over_tcp(transport::tcp_connect(&cfg.session.connect, timeout)?, link_config(cfg, Side::Bob, attempt, &log)),
        |b, l| b.run_link(l),
        |b| &mut b.c.report.totals,
    )?;
    Ok(bob.into_report())
}

/// Runs the endpoint(s) selected by `role` over the configured transport.
pub fn run_session(cfg: &RunConfig, role: Role) -> Result<SessionOutcome, SessionError> {
    match (role, cfg.session.transport) {
        (Role::Loopback, _) => {
            let mut c = cfg.clone();
            c.session.transport = TransportKind::Loopback;
            let (a, b) = run_loopback(&c, None)?;
            Ok(SessionOutcome { alice: Some(a), bob: Some(b) })
        }
        (Role::Alice, TransportKind::Tcp) => Ok(SessionOutcome { alice: Some(run_alice_tcp(cfg, None)?), bob: None }),
        (Role::Bob, TransportKind::Tcp) => Ok(SessionOutcome { alice: None, bob: Some(run_bob_tcp(cfg, None)?) }),
        _ => Err(SessionError::Config("alice/bob roles need session.transport = \"tcp\"".into())),
    }
}
