use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qkd_core::config::RunConfig;
use qkd_core::session::{self, keystore::container, Keystore, Role, SessionReport};

mod bench;

#[derive(Parser)]
#[command(name = "qkd", version, about = "Simulated QKD post-processing engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a key-distribution session.
    Run {
        /// JSON configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "loopback")]
        role: Role,
    },
    /// Throughput of one pipeline stage on synthetic data.
    Bench {
        #[arg(long, value_enum)]
        stage: bench::Stage,
        /// Input size in bits (stage default when omitted).
        #[arg(long)]
        bits: Option<usize>,
        /// Toeplitz block size for the privamp stage; 0 skips the blocked product.
        #[arg(long, default_value_t = 40)]
        block: usize,
    },
    /// Statistical tests on the entropy source output.
    Randtest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1_000_000)]
        bits: usize,
    },
    /// One-time-pad a file with key material from a key store.
    Keyapp {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Key store base path (`<base>.key` and `<base>.json`).
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Enc,
    Dec,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKD_LOG_LEVEL", "warn")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, role } => run(config.as_deref(), role),
        Cmd::Bench { stage, bits, block } => {
            println!("{}", bench::run(stage, bits, block)?);
            Ok(())
        }
        Cmd::Randtest { seed, bits } => {
            let sample = qkd_core::EntropySource::new(seed).next_bits(bits);
            let report = qkd_core::entropy::evaluate_bits(&sample)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.all_passed {
                bail!("entropy source failed at alpha = {}", report.alpha);
            }
            Ok(())
        }
        Cmd::Keyapp { mode, key, input, output } => keyapp(mode, &key, &input, &output),
    }
}

fn run(config: Option<&Path>, role: Role) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let out = PathBuf::from(&cfg.session.output_dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = session::run_session(&cfg, role)?;
    for (name, report) in [("alice", &outcome.alice), ("bob", &outcome.bob)] {
        if let Some(r) = report {
            write_artifacts(&out, name, r)?;
        }
    }
    Ok(())
}

fn write_artifacts(dir: &Path, name: &str, r: &SessionReport) -> Result<()> {
    r.keystore.save(&dir.join(name))?;
    r.write_csv(&dir.join(format!("{name}_stats.csv")))?;
    r.write_summary(&dir.join(format!("{name}_summary.json")))?;
    let s = r.summary();
    println!(
        "{name}: {} final bits, avg {:.0} bps, avg QBER {:.2}%, {} feedback events, digest {}",
        s.final_key_bits,
        s.avg_final_bps,
        s.avg_qber * 100.0,
        s.feedback_events,
        s.key_digest
    );
    Ok(())
}

fn keyapp(mode: Mode, key: &Path, input: &Path, output: &Path) -> Result<()> {
    let mut store = Keystore::load(key).with_context(|| format!("loading key store {}", key.display()))?;
    let data = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let result = match mode {
        Mode::Enc => {
            let (offset, ct) = store.xor_apply(&data)?;
            container::seal(offset, &ct)
        }
        Mode::Dec => {
            let (offset, ct) = container::open(&data)?;
            store.xor_at(offset, ct)?
        }
    };
    std::fs::write(output, result).with_context(|| format!("writing {}", output.display()))?;
    store.save_metadata(key)?;
    Ok(())
}
