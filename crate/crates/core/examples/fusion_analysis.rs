//! Breaks the default model's detection down by loop and by scale: the
//! f3-only, φ-only and fused AUROC of every loop against the final sum over
//! loops.
//!
//! ```text
//! cargo run --release --example fusion_analysis [out_dir]
//! ```

mod common;

use sir::harness::{evaluate_domain, splits_for};

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-one-shot");
    let (cfg, model) = common::trained_model(&out)?;
    for split in splits_for(&cfg)? {
        for test in &split.tests {
            let d = evaluate_domain(&model, &cfg, test)?;
            println!("{}", d.domain);
            for k in 1..=cfg.loops {
                let row = |s: &str| d.row(&format!("loop{k}.{s}")).unwrap_or(f64::NAN);
                println!(
                    "  loop {k}: f3 {:.4}  phi {:.4}  fused {:.4}",
                    row("f3"),
                    row("phi"),
                    row("fused")
                );
            }
            let best = d.best_single_loop_fused();
            println!("  final fused {:.4} (best single loop {best:.4}, gain {:+.4})", d.auroc_final, d.auroc_final - best);
        }
    }
    Ok(())
}
