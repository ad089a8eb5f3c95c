//! Command implementations behind the `sir` binary.
//!
//! Every command resolves its output directory as: `--out`, else the
//! config's `output_dir`, else `$SIR_OUT_ROOT/<command>`, else
//! `runs/<command>`. The resolved configuration is always written there as
//! `effective_config.toml`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::data::{synth_benchmark, Protocol, SynthSpec};
use crate::error::{Result, SirError};
use crate::harness::{
    evaluate_checkpoints, labelled_tests, load_models, loop_ablation, run_protocol, score_file, write_ablation,
    write_run,
};
use crate::nn::SirModel;
use crate::persist::load_checkpoint;
use crate::rng;
use crate::scoring::Label;
use crate::tensor::Tensor;
use crate::viz::{normalize_value, overlay_path, render_overlay, global_range};

pub const OUT_ROOT_ENV: &str = "SIR_OUT_ROOT";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing argument)
  3  configuration error (schema violation, invalid value, bad manifest)
  4  i/o error (missing or unwritable file)
  5  data error (malformed image)
  6  checkpoint error (bad magic, version, shape)
  7  numeric error (shape mismatch, undefined AUROC)

On failure a single line `error[<category>]: <message>` is written to stderr.";

#[derive(Debug, Parser)]
#[command(name = "sir", version, about = "Few-shot anomaly detection by iterative semantic reconstruction", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-domain benchmark.
    Synth(SynthArgs),
    /// Train according to the configured protocol and evaluate.
    Train(TrainArgs),
    /// Evaluate stored checkpoints on the configured test sets.
    Eval(EvalArgs),
    /// Score a single image.
    Score(ScoreArgs),
    /// Render anomaly-map overlays for the configured test sets.
    Render(RenderArgs),
    /// Train one model per loop count and tabulate AUROC.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub loops: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub sigma_smooth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Optional generator settings (TOML); flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = Config::default().seed)]
    pub seed: u64,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub contrast: Option<f64>,
    #[arg(long)]
    pub train_normals: Option<usize>,
    #[arg(long)]
    pub test_normals: Option<usize>,
    #[arg(long)]
    pub test_anomalies: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint file, or a run directory for specialized protocols.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Also write each per-loop map and the final map as PGM.
    #[arg(long)]
    pub dump_maps: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint file, or a run directory for specialized protocols.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Restrict to one domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Also render every per-loop map, not only the final one.
    #[arg(long)]
    pub per_loop: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Loop counts to compare.
    #[arg(long = "loop-values", value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
    pub loop_values: Vec<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

impl ConfigArgs {
    /// File values, then flag overrides, then validation.
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::from_file(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.loops {
            cfg.loops = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.sigma_smooth {
            cfg.sigma_smooth = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(flag: &OutArg, cfg_dir: Option<&Path>, command: &str) -> PathBuf {
    if let Some(d) = &flag.out {
        return d.clone();
    }
    if let Some(d) = cfg_dir {
        return d.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

fn prepare(args: &ConfigArgs, out: &OutArg, command: &str) -> Result<(Config, PathBuf)> {
    let mut cfg = args.resolve()?;
    let dir = out_dir(out, cfg.output_dir.as_deref(), command);
    cfg.output_dir = Some(dir.clone());
    cfg.write_echo(&dir)?;
    Ok((cfg, dir))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| SirError::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| SirError::io(path, e))
}

/// Writes the benchmark and a ready-to-train config beside it.
pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SirError::io(p, e))?;
            toml::from_str(&text).map_err(|e| SirError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => SynthSpec::default(),
    };
    let overrides = [
        (&mut spec.domains, a.domains),
        (&mut spec.size, a.size),
        (&mut spec.train_normals, a.train_normals),
        (&mut spec.test_normals, a.test_normals),
        (&mut spec.test_anomalies, a.test_anomalies),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(c) = a.contrast {
        spec.contrast = c;
    }
    let dir = out_dir(&a.out, None, "synth");
    let manifests = synth_benchmark(&spec, a.seed, &dir)?;
    let cfg = Config {
        seed: a.seed,
        image_size: spec.size,
        manifests: manifests.iter().map(|m| PathBuf::from(format!("{}.toml", m.domain))).collect(),
        ..Config::default()
    };
    cfg.validate()?;
    cfg.write_echo(&dir)?;
    println!("wrote {} domains to {}", manifests.len(), dir.display());
    Ok(dir)
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let (cfg, dir) = prepare(&a.config, &a.out, "train")?;
    let out = run_protocol(&cfg)?;
    write_run(&dir, &cfg, &out)?;
    print!("{}", out.report.fusion_table());
    Ok(dir)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let (cfg, dir) = prepare(&a.config, &a.out, "eval")?;
    let report = evaluate_checkpoints(&cfg, &a.ckpt)?;
    write(&dir.join("report.toml"), &report.to_toml())?;
    write(&dir.join("report.txt"), &report.fusion_table())?;
    print!("{}", report.fusion_table());
    Ok(dir)
}

fn restore_single(cfg: &Config, ckpt: &Path) -> Result<SirModel> {
    let ck = load_checkpoint(ckpt)?;
    let mut model = SirModel::new(cfg, rng::STUDENT);
    ck.apply_to(&mut model)?;
    Ok(model)
}

/// Map values scaled by their largest possible value, for PGM dumps.
fn dump_map(path: &Path, map: &Tensor, upper: f64) -> Result<()> {
    crate::data::save_image(path, &map.map(|v| v / upper))
}

pub fn cmd_score(a: &ScoreArgs) -> Result<PathBuf> {
    let (cfg, dir) = prepare(&a.config, &a.out, "score")?;
    let model = restore_single(&cfg, &a.ckpt)?;
    let result = score_file(&model, &cfg, &a.image)?;
    let s = result.scores();
    let mut doc = toml::Table::new();
    doc.insert("image".into(), a.image.display().to_string().into());
    doc.insert("score".into(), s.final_fused.into());
    let per_loop: Vec<toml::Value> = s
        .per_loop
        .iter()
        .map(|t| toml::Value::Array(t.iter().map(|&v| v.into()).collect()))
        .collect();
    doc.insert("per_loop_f3_phi_fused".into(), toml::Value::Array(per_loop));
    write(&dir.join("score.toml"), &toml::to_string(&doc).expect("score serializes"))?;
    if a.dump_maps {
        // Per-scale maps lie in [0, 2], so a loop map is at most 4.
        for (k, m) in result.per_loop_maps.iter().enumerate() {
            dump_map(&dir.join(format!("maps/loop{}.pgm", k + 1)), m, 4.0)?;
        }
        dump_map(&dir.join("maps/final.pgm"), &result.final_map, 4.0 * cfg.loops as f64)?;
    }
    println!("{}", s.final_fused);
    Ok(dir)
}

pub fn cmd_render(a: &RenderArgs) -> Result<PathBuf> {
    let (cfg, dir) = prepare(&a.config, &a.out, "render")?;
    let models = load_models(&cfg, &a.ckpt)?;
    let mut written = 0usize;
    for m in &models {
        for test in &m.split.tests {
            if a.domain.as_ref().is_some_and(|d| *d != test.domain) {
                continue;
            }
            let items = labelled_tests(test);
            let mut images = Vec::with_capacity(items.len());
            let mut results = Vec::with_capacity(items.len());
            for (path, _) in &items {
                let img = crate::data::preprocess(&crate::data::load_image(path)?, cfg.image_size, cfg.channels)?;
                results.push(crate::scoring::anomaly_maps(&m.model, &img, cfg.sigma_smooth)?);
                images.push(img);
            }
            // Loop index `None` is the final map; each kind is normalized
            // over the whole test set.
            let mut kinds: Vec<Option<usize>> = vec![None];
            if a.per_loop {
                kinds.extend((1..=cfg.loops).map(Some));
            }
            for kind in kinds {
                let maps: Vec<Tensor> = results
                    .iter()
                    .map(|r| match kind {
                        None => r.final_map.clone(),
                        Some(k) => r.per_loop_maps[k - 1].clone(),
                    })
                    .collect();
                let (lo, hi) = global_range(&maps, &cfg.render)?;
                for ((path, label), (img, map)) in items.iter().zip(images.iter().zip(&maps)) {
                    let norm = map.map(|v| normalize_value(v, lo, hi));
                    let bytes = render_overlay(img, &norm, &cfg.render)?;
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let id = match label {
                        Label::Normal if stem.starts_with("normal") => stem,
                        Label::Anomalous if stem.starts_with("anomalous") => stem,
                        Label::Normal => format!("normal_{stem}"),
                        Label::Anomalous => format!("anomalous_{stem}"),
                    };
                    let out = overlay_path(&dir, &test.domain, &id, kind);
                    if let Some(d) = out.parent() {
                        std::fs::create_dir_all(d).map_err(|e| SirError::io(d, e))?;
                    }
                    std::fs::write(&out, bytes).map_err(|e| SirError::io(&out, e))?;
                    written += 1;
                }
            }
        }
    }
    println!("wrote {written} overlays to {}", dir.display());
    Ok(dir)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<PathBuf> {
    let (cfg, dir) = prepare(&a.config, &a.out, "ablate")?;
    if a.loop_values.contains(&0) {
        return Err(SirError::Config("loop values must be at least 1".into()));
    }
    let out = loop_ablation(&cfg, &a.loop_values)?;
    write_ablation(&dir, &cfg, &out)?;
    print!("{}", out.table.text_table());
    Ok(dir)
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::Render(a) => cmd_render(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", cat.as_str());
            cat.exit_code()
        }
    }
}

/// Protocols accepted in config files, for help output and docs.
pub fn protocol_names() -> Vec<String> {
    [
        Protocol::OneShotUniversal,
        Protocol::FullShotUniversal,
        Protocol::KShotUniversal { k: 5 },
        Protocol::OneShotSpecialized,
        Protocol::FullShotSpecialized,
    ]
    .iter()
    .map(|p| p.name())
    .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use tempfile::TempDir;

    use super::*;

    fn sir(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("sir").chain(args.iter().copied()))
    }

    fn p(path: &Path) -> &str {
        path.to_str().unwrap()
    }

    /// Every file under `dir` with its bytes.
    fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.insert(path.clone(), std::fs::read(&path).unwrap());
                }
            }
        }
        out
    }

    /// A two-domain 32×32 benchmark and a config that trains in moments.
    fn fixture() -> (TempDir, PathBuf, PathBuf) {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        let code = sir(&[
            "synth", "--out", p(&data), "--domains", "2", "--size", "32", "--train-normals", "3",
            "--test-normals", "3", "--test-anomalies", "3",
        ]);
        assert_eq!(code, 0);
        let base = Config::from_file(&data.join("effective_config.toml")).unwrap();
        let cfg = Config {
            teacher_channels: [4, 4, 8, 8],
            iterations: 4,
            batch_size: 2,
            log_every: 2,
            loops: 2,
            ..base
        };
        let path = tmp.path().join("run.toml");
        std::fs::write(&path, cfg.to_toml_string()).unwrap();
        (tmp, data, path)
    }

    #[test]
    fn help_lists_exit_codes() {
        let help = <Cli as clap::CommandFactory>::command().render_long_help().to_string();
        for code in ["2  usage", "3  configuration", "4  i/o", "5  data", "6  checkpoint", "7  numeric"] {
            assert!(help.contains(code), "{code}");
        }
    }

    #[test]
    fn usage_and_config_failures_have_distinct_codes() {
        let tmp = TempDir::new().unwrap();
        assert_eq!(sir(&["train", "--bogus"]), 2);
        assert_eq!(sir(&["train"]), 2);
        assert_eq!(sir(&["frobnicate"]), 2);
        let missing = tmp.path().join("absent.toml");
        assert_eq!(sir(&["train", "--config", p(&missing)]), 4);
        let bad = tmp.path().join("bad.toml");
        std::fs::write(&bad, "loops = 0\n").unwrap();
        assert_eq!(sir(&["train", "--config", p(&bad)]), 3);
        std::fs::write(&bad, "unknown_key = 1\n").unwrap();
        assert_eq!(sir(&["train", "--config", p(&bad)]), 3);
    }

    #[test]
    fn commands_echo_config_and_reproduce() {
        let (tmp, data, cfg) = fixture();
        let before = snapshot(&data);
        let run = |name: &str| {
            let out = tmp.path().join(name);
            assert_eq!(sir(&["train", "--config", p(&cfg), "--out", p(&out)]), 0);
            out
        };
        let (a, b) = (run("a"), run("b"));
        for f in ["report.toml", "report.txt", "model.ckpt"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let echoed = Config::from_file(&a.join("effective_config.toml")).unwrap();
        assert_eq!(echoed.iterations, 4);
        assert_eq!(echoed.output_dir.as_deref(), Some(a.as_path()));

        // Flag overrides land in the echo.
        let c = tmp.path().join("c");
        assert_eq!(sir(&["train", "--config", p(&cfg), "--out", p(&c), "--iterations", "2", "--seed", "11"]), 0);
        let echoed = Config::from_file(&c.join("effective_config.toml")).unwrap();
        assert_eq!((echoed.iterations, echoed.seed), (2, 11));

        // Evaluating the stored model reproduces the training-time AUROCs.
        let ev = tmp.path().join("eval");
        let ckpt = a.join("model.ckpt");
        assert_eq!(sir(&["eval", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&ev)]), 0);
        let trained = crate::harness::RunReport::from_toml(&std::fs::read_to_string(a.join("report.toml")).unwrap()).unwrap();
        let evaluated = crate::harness::RunReport::from_toml(&std::fs::read_to_string(ev.join("report.toml")).unwrap()).unwrap();
        assert_eq!(trained.models[0].domains, evaluated.models[0].domains);
        assert!(ev.join("effective_config.toml").exists());

        let image = data.join(&Config::from_file(&cfg).unwrap().manifests[0])
            .parent()
            .unwrap()
            .to_path_buf();
        let image = std::fs::read_dir(image.join(format!("{}/test", crate::data::SynthSpec::default().domain_name(0))))
            .unwrap()
            .map(|e| e.unwrap().path())
            .min()
            .unwrap();
        let sc = tmp.path().join("score");
        assert_eq!(
            sir(&["score", "--config", p(&cfg), "--ckpt", p(&ckpt), "--image", p(&image), "--dump-maps", "--out", p(&sc)]),
            0
        );
        let doc: toml::Table = toml::from_str(&std::fs::read_to_string(sc.join("score.toml")).unwrap()).unwrap();
        assert!(doc["score"].as_float().unwrap() >= 0.0);
        assert_eq!(doc["per_loop_f3_phi_fused"].as_array().unwrap().len(), 2);
        for f in ["maps/loop1.pgm", "maps/loop2.pgm", "maps/final.pgm", "effective_config.toml"] {
            assert!(sc.join(f).exists(), "{f}");
        }

        let rd = tmp.path().join("render");
        assert_eq!(sir(&["render", "--config", p(&cfg), "--ckpt", p(&ckpt), "--per-loop", "--out", p(&rd)]), 0);
        let overlays: Vec<_> = snapshot(&rd).into_keys().filter(|k| k.extension().is_some_and(|e| e == "ppm")).collect();
        // 2 domains × 6 test images × (final + 2 loops).
        assert_eq!(overlays.len(), 36);
        for o in &overlays {
            crate::data::load_image(o).unwrap();
        }
        assert!(rd.join("effective_config.toml").exists());

        let ab = tmp.path().join("ablate");
        assert_eq!(sir(&["ablate", "--config", p(&cfg), "--loop-values", "1,2", "--out", p(&ab)]), 0);
        let table: crate::harness::AblationTable = toml::from_str(&std::fs::read_to_string(ab.join("ablation.toml")).unwrap()).unwrap();
        assert_eq!(table.rows.iter().map(|r| r.loops).collect::<Vec<_>>(), [1, 2]);
        assert!(ab.join("L2/model.ckpt").exists() && ab.join("effective_config.toml").exists());
        assert_eq!(sir(&["ablate", "--config", p(&cfg), "--loop-values", "0", "--out", p(&ab)]), 3);

        assert_eq!(snapshot(&data), before, "commands must not modify their inputs");
    }

    #[test]
    fn data_checkpoint_and_numeric_failures() {
        let (tmp, data, cfg) = fixture();
        let ckpt = tmp.path().join("junk.ckpt");
        std::fs::write(&ckpt, b"not a checkpoint").unwrap();
        let out = tmp.path().join("o");
        assert_eq!(sir(&["eval", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&out)]), 6);

        let good = tmp.path().join("t");
        assert_eq!(sir(&["train", "--config", p(&cfg), "--out", p(&good), "--iterations", "1"]), 0);
        let image = tmp.path().join("broken.pgm");
        std::fs::write(&image, b"P5 4 4 255\n\x01\x02").unwrap();
        let ck = good.join("model.ckpt");
        assert_eq!(sir(&["score", "--config", p(&cfg), "--ckpt", p(&ck), "--image", p(&image), "--out", p(&out)]), 5);

        // A checkpoint from a different architecture is a checkpoint error.
        let wide = tmp.path().join("wide.toml");
        let mut c = Config::from_file(&cfg).unwrap();
        c.teacher_channels = [4, 4, 8, 16];
        std::fs::write(&wide, c.to_toml_string()).unwrap();
        assert_eq!(sir(&["eval", "--config", p(&wide), "--ckpt", p(&ck), "--out", p(&out)]), 6);

        // A domain with no anomalies has no AUROC.
        let name = crate::data::SynthSpec::default().domain_name(0);
        let mut m = crate::data::DatasetManifest::load(&data.join(format!("{name}.toml"))).unwrap();
        m.test_anomalous.clear();
        let mpath = data.join("no_anomalies.toml");
        m.save(&mpath).unwrap();
        let mut c = Config::from_file(&cfg).unwrap();
        c.manifests = vec![mpath];
        let single = tmp.path().join("single.toml");
        std::fs::write(&single, c.to_toml_string()).unwrap();
        assert_eq!(sir(&["eval", "--config", p(&single), "--ckpt", p(&ck), "--out", p(&out)]), 7);
    }
}
