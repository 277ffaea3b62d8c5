use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn qkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkd")).current_dir(dir).args(args).output().expect("spawn qkd")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, session: Value) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, json!({ "session": session }).to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn summary(dir: &Path, who: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("out/{who}_summary.json"))).unwrap()).unwrap()
}

#[test]
fn default_loopback_run_matches_reference_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "output_dir": "out" }));
    ok(&qkd(dir.path(), &["run", "--config", &cfg, "--role", "loopback"]));
    let (a, b) = (summary(dir.path(), "alice"), summary(dir.path(), "bob"));
    assert_eq!(a["key_digest"], b["key_digest"]);
    assert_eq!(a["duration_s"], 600);
    let bps = a["avg_final_bps"].as_f64().unwrap();
    assert!((8_500.0..=25_500.0).contains(&bps), "{bps}");
    for k in ["avg_qber", "feedback_events"] {
        assert!(a.get(k).is_some());
    }
    let key = std::fs::read(dir.path().join("out/alice.key")).unwrap();
    assert_eq!(key, std::fs::read(dir.path().join("out/bob.key")).unwrap());
    assert_eq!(key.len() as u64, a["final_key_bits"].as_u64().unwrap().div_ceil(8));
    let csv = std::fs::read_to_string(dir.path().join("out/alice_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 601);
}

#[test]
fn zero_duration_writes_empty_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "duration_s": 0, "output_dir": "out" }));
    ok(&qkd(dir.path(), &["run", "--config", &cfg]));
    assert!(std::fs::read(dir.path().join("out/alice.key")).unwrap().is_empty());
    let csv = std::fs::read_to_string(dir.path().join("out/bob_stats.csv")).unwrap();
    assert_eq!(csv.trim(), "time_s,qber,sifted_bps,corrected_bps,final_bps,mode");
    assert_eq!(summary(dir.path(), "alice")["final_key_bits"], 0);
}

#[test]
fn bad_config_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"session": {"no_such_key": 1}}"#).unwrap();
    let o = qkd(dir.path(), &["run", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn tcp_roles_agree() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let cfg = write_config(
        dir.path(),
        json!({ "duration_s": 5, "transport": "tcp", "listen": addr, "connect": addr, "output_dir": "out" }),
    );
    let d = dir.path().to_owned();
    let c = cfg.clone();
    let alice = std::thread::spawn(move || qkd(&d, &["run", "--config", &c, "--role", "alice"]));
    ok(&qkd(dir.path(), &["run", "--config", &cfg, "--role", "bob"]));
    ok(&alice.join().unwrap());
    let (a, b) = (summary(dir.path(), "alice"), summary(dir.path(), "bob"));
    assert!(a["final_key_bits"].as_u64().unwrap() > 0);
    assert_eq!(a["key_digest"], b["key_digest"]);
}

#[test]
fn keyapp_round_trip_and_otp_discipline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({ "duration_s": 8, "output_dir": "out" }));
    ok(&qkd(d, &["run", "--config", &cfg]));

    let plain: Vec<u8> = (0..6_000u32).map(|i| (i * 7 + 3) as u8).collect();
    std::fs::write(d.join("msg"), &plain).unwrap();
    ok(&qkd(d, &["keyapp", "--mode", "enc", "--key", "out/alice", "--in", "msg", "--out", "msg.enc"]));
    let sealed = std::fs::read(d.join("msg.enc")).unwrap();
    assert_ne!(&sealed[sealed.len() - plain.len()..], &plain[..]);
    ok(&qkd(d, &["keyapp", "--mode", "dec", "--key", "out/bob", "--in", "msg.enc", "--out", "msg.dec"]));
    assert_eq!(std::fs::read(d.join("msg.dec")).unwrap(), plain);

    // the same range again is refused
    let o = qkd(d, &["keyapp", "--mode", "dec", "--key", "out/bob", "--in", "msg.enc", "--out", "again"]);
    assert!(!o.status.success());

    // a second message takes fresh key
    ok(&qkd(d, &["keyapp", "--mode", "enc", "--key", "out/alice", "--in", "msg", "--out", "msg2.enc"]));
    assert_ne!(std::fs::read(d.join("msg2.enc")).unwrap(), sealed);

    let available = std::fs::metadata(d.join("out/alice.key")).unwrap().len() as usize;
    std::fs::write(d.join("big"), vec![0u8; available + 1]).unwrap();
    let o = qkd(d, &["keyapp", "--mode", "enc", "--key", "out/alice", "--in", "big", "--out", "big.enc"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("exhausted"));
}

#[test]
fn empty_file_consumes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({ "duration_s": 5, "output_dir": "out" }));
    ok(&qkd(d, &["run", "--config", &cfg]));
    let before = std::fs::read_to_string(d.join("out/alice.json")).unwrap();
    std::fs::write(d.join("empty"), b"").unwrap();
    ok(&qkd(d, &["keyapp", "--mode", "enc", "--key", "out/alice", "--in", "empty", "--out", "empty.enc"]));
    let after: Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/alice.json")).unwrap()).unwrap();
    let before: Value = serde_json::from_str(&before).unwrap();
    assert_eq!(before["consumed_ranges"], after["consumed_ranges"]);
}

#[test]
fn randtest_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&qkd(dir.path(), &["randtest", "--seed", "3", "--bits", "200000"]));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_bits"], 200_000);
    assert_eq!(v["all_passed"], true);
    assert!(!qkd(dir.path(), &["randtest", "--bits", "10"]).status.success());
}

#[test]
fn bench_stages_handle_any_size() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["sift", "reconcile", "privamp"] {
        let out = ok(&qkd(dir.path(), &["bench", "--stage", stage, "--bits", "0"]));
        assert!(out.contains("items=0"), "{out}");
        let out = ok(&qkd(dir.path(), &["bench", "--stage", stage, "--bits", "20000", "--block", "64"]));
        assert!(out.contains(&format!("stage={stage} bits=20000")), "{out}");
    }
    let out = ok(&qkd(dir.path(), &["bench", "--stage", "privamp", "--bits", "8192"]));
    assert!(out.contains("blocked_matches=true"), "{out}");
}
