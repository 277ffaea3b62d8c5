use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use qkd_core::bits;
use qkd_core::config::{RunConfig, TransportKind};
use qkd_core::session::{self, wire::msg, ControlEvent, SessionReport};
use qkd_core::sifting;
use qkd_core::syncframe::FrameFormat;

fn config(duration: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.session.duration_s = duration;
    cfg
}

fn h2(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 0.0;
    }
    -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
}

fn assert_agree(a: &SessionReport, b: &SessionReport) {
    assert_eq!(a.keystore.bits(), b.keystore.bits());
    assert_eq!(a.keystore.blocks(), b.keystore.blocks());
    assert_eq!(a.keystore.digest(), b.keystore.digest());
}

#[test]
fn sixty_seconds_rate_algebra_and_message_audit() {
    let cfg = config(60);
    let log = Arc::new(Mutex::new(Vec::new()));
    let (a, b) = session::run_loopback(&cfg, Some(log.clone())).unwrap();
    assert_agree(&a, &b);
    let t = &a.totals;
    assert!(t.final_bits > 0 && t.blocks_failed == 0);

    // 20 MHz x 1% clicks x half the bases match x 9/10 not disclosed x 18/19 signal-bearing slots
    let analytic = 20e6 * 0.01 * 0.5 * 0.9 * 18.0 / 19.0;
    let running: Vec<_> = a.ticks.iter().filter(|t| t.mode == "running").collect();
    let sifted = running.iter().map(|t| t.sifted_bps).sum::<f64>() / running.len() as f64;
    assert!((sifted / analytic - 1.0).abs() < 0.1, "sifted {sifted} vs {analytic}");

    let mean_sf = a.sfactors.iter().sum::<f64>() / a.sfactors.len() as f64;
    let yield_ = t.corrected_bits as f64 / t.sifted_bits as f64;
    let predicted = t.sifted_bits as f64 * yield_ * mean_sf;
    assert!((t.final_bits as f64 / predicted - 1.0).abs() < 0.1, "final {} vs {predicted}", t.final_bits);

    // disclosed information sits between the Shannon bound and twice it
    let qber = t.signal_errors as f64 / t.signal_compared as f64;
    let f = t.leaked_bits as f64 / (t.corrected_bits as f64 * h2(qber));
    assert!((1.0..2.0).contains(&f), "leak ratio {f}");

    let log = log.lock().unwrap();
    let fmt = FrameFormat::default();
    let mut announces = 0;
    for m in log.iter().filter(|m| m.msg_type == msg::BASIS_LOC) {
        let (_, body) = session::wire::decode_tagged(&m.payload, "BASIS_LOC").unwrap();
        sifting::decode_announcement(body, &fmt).expect("announcement with cleared bits");
        announces += 1;
    }
    assert!(announces >= 59);

    let key = bits::to_bytes(a.keystore.bits());
    let chunks: HashSet<&[u8]> = key.chunks_exact(16).collect();
    for m in log.iter() {
        assert!(
            m.payload.windows(16).all(|w| !chunks.contains(w)),
            "final key material in {} payload",
            msg::name(m.msg_type)
        );
    }
}

#[test]
fn kill_mid_block_keeps_keys_equal() {
    let mut cfg = config(20);
    cfg.session.faults.kill_after_messages = Some(1500);
    let (a, b) = session::run_loopback(&cfg, None).unwrap();
    assert_agree(&a, &b);
    assert!(a.totals.link_failures >= 1);
    assert!(a.keystore.len_bits() > 0);
}

#[test]
fn gate_slip_triggers_delay_adjust() {
    let mut cfg = config(30);
    cfg.session.faults.gate_slip_at_s = Some(10);
    let (a, b) = session::run_loopback(&cfg, None).unwrap();
    assert_agree(&a, &b);
    assert!(a.events.iter().any(|(_, e)| *e == ControlEvent::DelayAdjust));
    let paused = a.ticks.iter().filter(|t| t.mode == "pause").count() as u32;
    assert_eq!(paused, cfg.control.delay_adjust_duration_s);
    assert!(a.ticks[11..].iter().any(|t| t.mode == "realign"));
}

#[test]
fn runs_are_deterministic() {
    let cfg = config(8);
    let (a1, _) = session::run_loopback(&cfg, None).unwrap();
    let (a2, _) = session::run_loopback(&cfg, None).unwrap();
    assert_eq!(a1.keystore.digest(), a2.keystore.digest());
    let mut other = cfg.clone();
    other.session.seed += 1;
    let (a3, _) = session::run_loopback(&other, None).unwrap();
    assert_ne!(a1.keystore.digest(), a3.keystore.digest());
}

#[test]
fn zero_duration_gives_empty_outputs() {
    let (a, b) = session::run_loopback(&config(0), None).unwrap();
    assert_eq!(a.keystore.len_bits(), 0);
    assert_eq!(b.keystore.len_bits(), 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.csv");
    a.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), "time_s,qber,sifted_bps,corrected_bps,final_bps,mode");
}

#[test]
fn tcp_endpoints_agree() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = config(6);
    cfg.session.transport = TransportKind::Tcp;
    cfg.session.listen = format!("127.0.0.1:{port}");
    cfg.session.connect = cfg.session.listen.clone();
    let acfg = cfg.clone();
    let alice = std::thread::spawn(move || session::run_alice_tcp(&acfg, None));
    let b = session::run_bob_tcp(&cfg, None).unwrap();
    let a = alice.join().unwrap().unwrap();
    assert_agree(&a, &b);
    assert!(a.keystore.len_bits() > 0);
    assert_eq!(a.summary().key_digest, b.summary().key_digest);
}
