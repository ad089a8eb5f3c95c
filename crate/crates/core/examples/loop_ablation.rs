//! Trains one model per loop count on the synthetic benchmark and prints
//! the ablation table. Loop counts and iterations are optional arguments.
//!
//! ```text
//! cargo run --release --example loop_ablation [out_dir] [1,3,5,7] [iterations]
//! ```

mod common;

use sir::data::SynthSpec;
use sir::harness::{loop_ablation, write_ablation};
use sir::Config;

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-ablation");
    let args: Vec<String> = std::env::args().collect();
    let loops: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 3, 5, 7]);
    let iterations = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(Config::default().iterations);
    let cfg = common::benchmark(&out.join("data"), &SynthSpec::default(), Config { iterations, ..Config::default() })?;
    let result = loop_ablation(&cfg, &loops)?;
    write_ablation(&out.join("ablation"), &cfg, &result)?;
    print!("{}", result.table.text_table());
    for (row, run) in result.table.rows.iter().zip(&result.runs) {
        println!("L = {}: {:.1}s", row.loops, run.timing.total_seconds);
    }
    Ok(())
}
