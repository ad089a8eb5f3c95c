//! Full-shot specialized protocol: one model per domain, each trained on
//! all of that domain's normals and tested only on it. Iterations default
//! to 200 here to keep three trainings short.
//!
//! ```text
//! cargo run --release --example specialized_protocol [out_dir] [iterations]
//! ```

mod common;

use sir::data::{Protocol, SynthSpec};
use sir::harness::{run_protocol, write_run};
use sir::Config;

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-specialized");
    let iterations = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let base = Config {
        protocol: Protocol::FullShotSpecialized,
        iterations,
        ..Config::default()
    };
    let cfg = common::benchmark(&out.join("data"), &SynthSpec::default(), base)?;
    let run = run_protocol(&cfg)?;
    write_run(&out.join("run"), &cfg, &run)?;
    print!("{}", run.report.fusion_table());
    for (m, t) in run.report.models.iter().zip(&run.timing.splits) {
        println!("{:<8} {} training images, {:.1}s", m.split, m.train_images.len(), t.train_seconds);
    }
    println!("checkpoints under {}", out.join("run/checkpoints").display());
    Ok(())
}
