//! Scores single test images with the default model and compares normal
//! scores against the median anomalous score of each domain.
//!
//! ```text
//! cargo run --release --example score_image [out_dir]
//! ```

mod common;

use sir::harness::{score_file, splits_for};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-one-shot");
    let (cfg, model) = common::trained_model(&out)?;
    for split in splits_for(&cfg)? {
        for test in &split.tests {
            let anomalous: Vec<f64> = test
                .anomalous
                .iter()
                .map(|p| score_file(&model, &cfg, p).map(|r| r.score))
                .collect::<sir::Result<_>>()?;
            let med = median(anomalous);
            let normal = &test.normal[0];
            let r = score_file(&model, &cfg, normal)?;
            let per_loop: Vec<String> = r.scores().per_loop.iter().map(|t| format!("{:.3}", t[2])).collect();
            println!(
                "{:<8} {}: score {:.4} (per loop {}), anomalous median {med:.4}, below: {}",
                test.domain,
                normal.file_name().unwrap_or_default().to_string_lossy(),
                r.score,
                per_loop.join("/"),
                r.score < med
            );
        }
    }
    Ok(())
}
