use std::fmt;
use std::time::Instant;

use anyhow::Result;
use clap::ValueEnum;
use qkd_core::entropy::{EntropySource, PulseTrain};
use qkd_core::photonics::Receiver;
use qkd_core::privamp::{self, ToeplitzSpec};
use qkd_core::reconcile::{self, ReconcileConfig};
use qkd_core::syncframe::{FrameFormat, Measurement};
use qkd_core::{sifting, BitString, OpticalConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Stage {
    Sift,
    Reconcile,
    Privamp,
}

pub struct Report {
    stage: Stage,
    bits: usize,
    items: usize,
    seconds: f64,
    extra: Vec<(&'static str, String)>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rate = |x: usize| if self.seconds > 0.0 { x as f64 / self.seconds } else { 0.0 };
        write!(
            f,
            "stage={} bits={} items={} seconds={:.4} bits_per_s={:.0} items_per_s={:.1}",
            self.stage.to_possible_value().expect("no skipped variants").get_name(),
            self.bits,
            self.items,
            self.seconds,
            rate(self.bits),
            rate(self.items)
        )?;
        for (k, v) in &self.extra {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

pub fn run(stage: Stage, bits: Option<usize>, block: usize) -> Result<Report> {
    let mut r = Report { stage, bits: 0, items: 0, seconds: 0.0, extra: Vec::new() };
    match stage {
        Stage::Sift => sift(&mut r, bits.unwrap_or(100_000))?,
        Stage::Reconcile => reconcile_stage(&mut r, bits.unwrap_or(1_000_000))?,
        Stage::Privamp => privamp_stage(&mut r, bits.unwrap_or(262_144), block)?,
    }
    Ok(r)
}

/// `bits` detections from the simulated channel; items are frames.
fn sift(r: &mut Report, bits: usize) -> Result<()> {
    if bits == 0 {
        return Ok(());
    }
    let fmt = FrameFormat::default();
    let train = PulseTrain::new(11);
    let mut rx = Receiver::new(OpticalConfig::default());
    let mut rng = EntropySource::new(12);
    let mut events = Vec::new();
    let mut frame = 0u64;
    while events.len() < bits {
        let first = frame * fmt.frame_clocks();
        rx.simulate_range(&train, first..first + fmt.k_signal_clocks as u64, &mut rng, &mut events);
        frame += 1;
    }
    events.truncate(bits);
    let meas: Vec<Measurement> = events.iter().map(Measurement::from).collect();
    let t = Instant::now();
    let (a, _) = sifting::sift(&train, [0; 3], &meas, &fmt, 10)?;
    r.seconds = t.elapsed().as_secs_f64();
    r.bits = bits;
    r.items = frame as usize;
    r.extra.push(("sifted_bits", a.bits.len().to_string()));
    Ok(())
}

fn noisy_pair(n: usize, qber: f64, seed: u64) -> (BitString, BitString) {
    let mut rng = EntropySource::new(seed);
    let a = rng.next_bits(n);
    let mut b = a.clone();
    for i in 0..n {
        if rng.next_f64() < qber {
            let v = b[i];
            b.set(i, !v);
        }
    }
    (a, b)
}

/// 2% QBER, split into session-sized blocks.
fn reconcile_stage(r: &mut Report, bits: usize) -> Result<()> {
    const QBER: f64 = 0.02;
    const BLOCK: usize = 4096;
    if bits == 0 {
        return Ok(());
    }
    let (a, b) = noisy_pair(bits, QBER, 21);
    let cfg = ReconcileConfig::default();
    let (mut leaked, mut ok) = (0u64, 0usize);
    let t = Instant::now();
    for (i, start) in (0..bits).step_by(BLOCK).enumerate() {
        let end = (start + BLOCK).min(bits);
        let out = reconcile::reconcile_session(i as u64, &a[start..end].to_bitvec(), &b[start..end].to_bitvec(), &cfg, QBER);
        if let Ok(o) = out {
            leaked += o.alice.leaked_bits;
            ok += o.alice.crc_ok as usize;
        }
        r.items += 1;
    }
    r.seconds = t.elapsed().as_secs_f64();
    r.bits = bits;
    r.extra.push(("blocks_ok", ok.to_string()));
    r.extra.push(("efficiency", format!("{:.3}", reconcile::efficiency(leaked, bits, QBER)?)));
    Ok(())
}

/// SFactor 0.3 compression; items are output bits.
fn privamp_stage(r: &mut Report, bits: usize, block: usize) -> Result<()> {
    let m = privamp::final_key_length(bits, 0.3);
    if bits == 0 || m == 0 {
        return Ok(());
    }
    let key = EntropySource::new(31).next_bits(bits);
    let spec = ToeplitzSpec::random(bits, m, 32)?;
    let t = Instant::now();
    let fast = privamp::toeplitz_hash(&key, &spec)?;
    r.seconds = t.elapsed().as_secs_f64();
    r.bits = bits;
    r.items = m;
    if block > 0 {
        let t = Instant::now();
        let blocked = privamp::blocked_multiply(&key, &spec, block)?;
        r.extra.push(("blocked_seconds", format!("{:.4}", t.elapsed().as_secs_f64())));
        r.extra.push(("block_ops", blocked.block_ops.to_string()));
        r.extra.push(("blocked_matches", (blocked.bits == fast).to_string()));
    }
    Ok(())
}
