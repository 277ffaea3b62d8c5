use std::time::Instant;

use qkd_core::entropy::EntropySource;
use qkd_core::privamp::{self, ToeplitzSpec};
use qkd_core::reconcile::{self, ReconcileConfig};

#[test]
fn ten_thousand_blocks_at_five_percent() {
    let (n, blocks) = (4096usize, 10_000u64);
    let cfg = ReconcileConfig::default();
    let mut rng = EntropySource::new(55);
    let mut ok = 0;
    for id in 0..blocks {
        let a = rng.next_bits(n);
        let mut b = a.clone();
        for i in 0..n {
            if rng.below(100) < 5 {
                let v = b[i];
                b.set(i, !v);
            }
        }
        if let Ok(out) = reconcile::reconcile_session(id, &a, &b, &cfg, 0.05) {
            ok += (out.alice.crc_ok && out.bob.bits == a) as u64;
        }
    }
    assert!(ok as f64 / blocks as f64 >= 0.999, "{ok}/{blocks}");
}

#[test]
fn full_size_blocked_product_matches() {
    let (n, m) = (262_144, 78_643);
    let key = EntropySource::new(1).next_bits(n);
    let spec = ToeplitzSpec::random(n, m, 2).unwrap();
    let t = Instant::now();
    let fast = privamp::toeplitz_hash(&key, &spec).unwrap();
    let t_fast = t.elapsed();
    let t = Instant::now();
    let blocked = privamp::blocked_multiply(&key, &spec, 40).unwrap();
    println!("hash {:?}, blocked b=40 {:?}", t_fast, t.elapsed());
    assert_eq!(blocked.bits, fast);
    assert_eq!(fast.len(), m);
}
