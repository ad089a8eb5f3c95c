//! Renders jet overlays of the final and per-loop anomaly maps for a few
//! normal and anomalous test images of every domain.
//!
//! Each map kind is normalized with one global percentile range over the
//! images shown, so colors are comparable across images.
//!
//! ```text
//! cargo run --release --example render_heatmaps [out_dir]
//! ```

mod common;

use sir::data::{load_image, preprocess};
use sir::harness::{labelled_tests, splits_for};
use sir::scoring::{anomaly_maps, Label};
use sir::viz::{global_range, normalize_value, overlay_path, render_overlay};
use sir::{SirError, Tensor};

const PER_CLASS: usize = 3;

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-one-shot");
    let (cfg, model) = common::trained_model(&out)?;
    let dir = out.join("overlays");
    let mut written = 0;
    for split in splits_for(&cfg)? {
        for test in &split.tests {
            let mut picked = labelled_tests(test);
            let anomalies = picked.iter().position(|(_, l)| *l == Label::Anomalous).unwrap_or(picked.len());
            picked = picked[..PER_CLASS.min(anomalies)]
                .iter()
                .chain(picked[anomalies..].iter().take(PER_CLASS))
                .cloned()
                .collect();
            let mut images = Vec::new();
            let mut results = Vec::new();
            for (path, _) in &picked {
                let img = preprocess(&load_image(path)?, cfg.image_size, cfg.channels)?;
                results.push(anomaly_maps(&model, &img, cfg.sigma_smooth)?);
                images.push(img);
            }
            let kinds = std::iter::once(None).chain((1..=cfg.loops).map(Some));
            for kind in kinds {
                let maps: Vec<Tensor> = results
                    .iter()
                    .map(|r| match kind {
                        None => r.final_map.clone(),
                        Some(k) => r.per_loop_maps[k - 1].clone(),
                    })
                    .collect();
                let (lo, hi) = global_range(&maps, &cfg.render)?;
                for (((path, _), img), map) in picked.iter().zip(&images).zip(&maps) {
                    let norm = map.map(|v| normalize_value(v, lo, hi));
                    let name = path.file_stem().unwrap_or_default().to_string_lossy();
                    let target = overlay_path(&dir, &test.domain, &name, kind);
                    let parent = target.parent().expect("overlay has a parent");
                    std::fs::create_dir_all(parent).map_err(|e| SirError::io(parent, e))?;
                    std::fs::write(&target, render_overlay(img, &norm, &cfg.render)?).map_err(|e| SirError::io(&target, e))?;
                    written += 1;
                }
            }
            let scores: Vec<String> = picked
                .iter()
                .zip(&results)
                .map(|((_, l), r)| format!("{}{:.3}", if *l == Label::Normal { "n:" } else { "a:" }, r.score))
                .collect();
            println!("{:<8} scores {}", test.domain, scores.join(" "));
        }
    }
    println!("wrote {written} overlays under {}", dir.display());
    Ok(())
}
