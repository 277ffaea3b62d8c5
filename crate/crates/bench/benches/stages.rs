use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use qkd_core::entropy::{EntropySource, PulseTrain};
use qkd_core::photonics::Receiver;
use qkd_core::privamp::{self, ToeplitzSpec};
use qkd_core::reconcile::{self, ReconcileConfig};
use qkd_core::syncframe::{FrameFormat, Measurement};
use qkd_core::{sifting, OpticalConfig};
use std::hint::black_box;

fn sift(c: &mut Criterion) {
    let fmt = FrameFormat::default();
    let train = PulseTrain::new(1);
    let mut rx = Receiver::new(OpticalConfig::default());
    let mut rng = EntropySource::new(2);
    let mut events = Vec::new();
    for fr in 0..2000u64 {
        let first = fr * fmt.frame_clocks();
        rx.simulate_range(&train, first..first + fmt.k_signal_clocks as u64, &mut rng, &mut events);
    }
    let meas: Vec<Measurement> = events.iter().map(Measurement::from).collect();
    let mut g = c.benchmark_group("sift");
    g.throughput(Throughput::Elements(meas.len() as u64));
    g.bench_function("2000 frames", |b| b.iter(|| sifting::sift(&train, [0; 3], black_box(&meas), &fmt, 10).unwrap()));
    g.finish();
}

fn reconcile_blocks(c: &mut Criterion) {
    let cfg = ReconcileConfig::default();
    let mut g = c.benchmark_group("reconcile");
    g.sample_size(20);
    for qber in [0.01, 0.02, 0.03] {
        let mut rng = EntropySource::new(3);
        let a = rng.next_bits(4096);
        let mut e = a.clone();
        for i in 0..a.len() {
            if rng.next_f64() < qber {
                let v = e[i];
                e.set(i, !v);
            }
        }
        g.throughput(Throughput::Elements(4096));
        g.bench_with_input(BenchmarkId::new("4096-bit block", qber), &qber, |bch, &q| {
            bch.iter(|| reconcile::reconcile_session(0, &a, black_box(&e), &cfg, q).unwrap())
        });
    }
    g.finish();
}

fn toeplitz(c: &mut Criterion) {
    let mut g = c.benchmark_group("privamp");
    g.sample_size(10);
    let n = 262_144;
    let m = privamp::final_key_length(n, 0.3);
    let key = EntropySource::new(4).next_bits(n);
    let spec = ToeplitzSpec::random(n, m, 5).unwrap();
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("hash 262144 bits", |b| b.iter(|| privamp::toeplitz_hash(black_box(&key), &spec).unwrap()));
    let (n, m) = (16_384, 4_915);
    let key = EntropySource::new(6).next_bits(n);
    let spec = ToeplitzSpec::random(n, m, 7).unwrap();
    for block in [40, 64] {
        g.bench_with_input(BenchmarkId::new("blocked 16384 bits", block), &block, |b, &blk| {
            b.iter(|| privamp::blocked_multiply(black_box(&key), &spec, blk).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sift, reconcile_blocks, toeplitz);
criterion_main!(benches);
