//! Shared setup for the examples: the default synthetic benchmark and a
//! trained one-shot model, both cached under an output directory.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sir::data::{synth_benchmark, SynthSpec};
use sir::harness::{run_protocol, write_run};
use sir::nn::SirModel;
use sir::persist::load_checkpoint;
use sir::{rng, Config};

/// First command-line argument, or a directory under the system temp dir.
pub fn out_dir(default_name: &str) -> PathBuf {
    std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(default_name))
}

/// Writes the benchmark for `spec` into `dir` and returns a config that
/// points at its manifests.
pub fn benchmark(dir: &Path, spec: &SynthSpec, base: Config) -> sir::Result<Config> {
    let manifests = synth_benchmark(spec, base.seed, dir)?;
    Ok(Config {
        image_size: spec.size,
        manifests: manifests.iter().map(|m| dir.join(format!("{}.toml", m.domain))).collect(),
        ..base
    })
}

/// The default one-shot universal model, trained once and reused from
/// `<out>/run/model.ckpt` afterwards.
pub fn trained_model(out: &Path) -> sir::Result<(Config, SirModel)> {
    let cfg = benchmark(&out.join("data"), &SynthSpec::default(), Config::default())?;
    let ckpt = out.join("run").join("model.ckpt");
    if !ckpt.exists() {
        eprintln!("training the default model once (about two minutes)...");
        let run = run_protocol(&cfg)?;
        write_run(&out.join("run"), &cfg, &run)?;
    }
    let mut model = SirModel::new(&cfg, rng::STUDENT);
    load_checkpoint(&ckpt)?.apply_to(&mut model)?;
    Ok((cfg, model))
}
