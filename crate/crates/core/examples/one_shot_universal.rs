//! Generates the synthetic benchmark, trains one model on a single normal
//! image per domain and prints the per-loop / fusion AUROC table.
//!
//! ```text
//! cargo run --release --example one_shot_universal [out_dir]
//! ```

mod common;

use sir::data::SynthSpec;
use sir::harness::{run_protocol, write_run};
use sir::Config;

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-one-shot");
    let cfg = common::benchmark(&out.join("data"), &SynthSpec::default(), Config::default())?;
    let run = run_protocol(&cfg)?;
    write_run(&out.join("run"), &cfg, &run)?;
    print!("{}", run.report.fusion_table());
    for (d, a) in run.report.domain_aurocs() {
        println!("{d:>10}: final fused AUROC {a:.4}");
    }
    let m = &run.report.models[0];
    let first = m.loss.first().map_or(f64::NAN, |s| s.loss);
    let last = m.loss.last().map_or(f64::NAN, |s| s.loss);
    println!("training images: {}", m.train_images.join(", "));
    println!("loss {first:.4} -> {last:.4} over {} iterations", m.iterations);
    println!("wall clock {:.1}s (train {:.1}s)", run.timing.total_seconds, run.timing.splits[0].train_seconds);
    println!("outputs in {}", out.display());
    Ok(())
}
