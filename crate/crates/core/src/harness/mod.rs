//! Protocol runs, evaluation, the loop-count ablation, gradient checks and
//! report emission.
//!
//! Output layout of a run directory:
//!
//! ```text
//! report.toml     RunReport (reproducible byte for byte)
//! report.txt      per-loop / fusion AUROC table
//! timing.toml     wall-clock seconds (not reproducible, kept apart)
//! model.ckpt      universal protocols
//! checkpoints/<domain>.ckpt   specialized protocols
//! ```

mod gradcheck;
mod report;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use report::{
    mean, row_names, AblationRow, AblationTable, AurocRow, DomainReport, ImageRecord, ModelReport, RunReport,
    SplitTiming, Timing, FINAL_ROW,
};
pub use train::{load_train_images, LossSample, ModelStreams, Trainer};

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Config;
use crate::data::{build_protocol, load_image, load_manifests, preprocess, DomainTest, ProtocolSplit};
use crate::error::{Result, SirError};
use crate::nn::SirModel;
use crate::persist::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::scoring::{anomaly_maps, auroc, AnomalyResult, Label};

/// Loads, preprocesses and scores one image file.
pub fn score_file(model: &SirModel, cfg: &Config, path: &Path) -> Result<AnomalyResult> {
    let img = preprocess(&load_image(path)?, cfg.image_size, cfg.channels)?;
    anomaly_maps(model, &img, cfg.sigma_smooth)
}

/// Test images of a domain in report order: normals, then anomalies.
pub fn labelled_tests(test: &DomainTest) -> Vec<(PathBuf, Label)> {
    test.normal
        .iter()
        .map(|p| (p.clone(), Label::Normal))
        .chain(test.anomalous.iter().map(|p| (p.clone(), Label::Anomalous)))
        .collect()
}

/// Scores every test image of one domain and builds its AUROC rows.
pub fn evaluate_domain(model: &SirModel, cfg: &Config, test: &DomainTest) -> Result<DomainReport> {
    let items = labelled_tests(test);
    let loops = model.loops;
    let mut columns = vec![Vec::with_capacity(items.len()); 3 * loops];
    let mut finals = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut images = Vec::with_capacity(items.len());
    for (path, label) in items {
        let s = score_file(model, cfg, &path)?.scores();
        for (k, triple) in s.per_loop.iter().enumerate() {
            for (j, v) in triple.iter().enumerate() {
                columns[3 * k + j].push(*v);
            }
        }
        finals.push(s.final_fused);
        labels.push(label);
        images.push(ImageRecord {
            file: path.display().to_string(),
            label,
            score: s.final_fused,
        });
    }
    let with_domain = |e: SirError| match e {
        SirError::UndefinedAuroc(m) => SirError::UndefinedAuroc(format!("domain {}: {m}", test.domain)),
        other => other,
    };
    let names = row_names(loops);
    let mut rows = Vec::with_capacity(names.len());
    for (name, col) in names.iter().zip(columns.iter().chain(std::iter::once(&finals))) {
        rows.push(AurocRow {
            row: name.clone(),
            auroc: auroc(col, &labels).map_err(with_domain)?,
        });
    }
    Ok(DomainReport {
        domain: test.domain.clone(),
        auroc_final: rows.last().expect("final row").auroc,
        rows,
        images,
    })
}

/// Everything a protocol run produces, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// `(split name, checkpoint)` per trained model.
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub models: Vec<SirModel>,
    pub timing: Timing,
}

fn streams_for(cfg: &Config, index: usize) -> ModelStreams {
    if cfg.protocol.is_universal() {
        ModelStreams::base()
    } else {
        ModelStreams::specialized(index)
    }
}

pub fn splits_for(cfg: &Config) -> Result<Vec<ProtocolSplit>> {
    cfg.validate()?;
    let manifests = load_manifests(&cfg.manifests)?;
    build_protocol(&manifests, cfg.protocol, cfg.seed)
}

/// Builds the protocol's splits, trains one model per split and evaluates
/// each on its test domains.
pub fn run_protocol(cfg: &Config) -> Result<RunOutput> {
    let splits = splits_for(cfg)?;
    let started = Instant::now();
    let mut models = Vec::with_capacity(splits.len());
    let mut reports = Vec::with_capacity(splits.len());
    let mut checkpoints = Vec::with_capacity(splits.len());
    let mut timings = Vec::with_capacity(splits.len());
    for (i, split) in splits.iter().enumerate() {
        let t0 = Instant::now();
        let images = load_train_images(cfg, &split.train)?;
        let mut trainer = Trainer::new(cfg, &split.name, &images, streams_for(cfg, i))?;
        let loss = trainer.run(cfg.iterations as u64, cfg.log_every as u64)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let domains = split
            .tests
            .iter()
            .map(|t| evaluate_domain(&trainer.model, cfg, t))
            .collect::<Result<Vec<_>>>()?;
        timings.push(SplitTiming {
            split: split.name.clone(),
            iterations: trainer.step_count(),
            train_seconds,
            eval_seconds: t1.elapsed().as_secs_f64(),
        });
        reports.push(ModelReport {
            split: split.name.clone(),
            iterations: trainer.step_count(),
            train_images: split.train.iter().map(|s| s.path.display().to_string()).collect(),
            loss,
            domains,
        });
        checkpoints.push((split.name.clone(), trainer.checkpoint(cfg)));
        models.push(trainer.model);
    }
    Ok(RunOutput {
        report: RunReport {
            protocol: cfg.protocol.name(),
            seed: cfg.seed,
            loops: cfg.loops,
            models: reports,
            config: cfg.echo(),
        },
        checkpoints,
        models,
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            splits: timings,
        },
    })
}

/// Where a split's checkpoint lives inside a run directory.
pub fn checkpoint_path(dir: &Path, cfg: &Config, split: &str) -> PathBuf {
    if cfg.protocol.is_universal() {
        dir.join("model.ckpt")
    } else {
        dir.join("checkpoints").join(format!("{split}.ckpt"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SirError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| SirError::io(path, e))
}

/// Writes report, table, timing sidecar and checkpoints into `dir`.
pub fn write_run(dir: &Path, cfg: &Config, out: &RunOutput) -> Result<()> {
    write_text(&dir.join("report.toml"), &out.report.to_toml())?;
    write_text(&dir.join("report.txt"), &out.report.fusion_table())?;
    write_text(
        &dir.join("timing.toml"),
        &toml::to_string(&out.timing).expect("timing serializes"),
    )?;
    for (split, ck) in &out.checkpoints {
        save_checkpoint(ck, &checkpoint_path(dir, cfg, split))?;
    }
    Ok(())
}

/// A model restored from a checkpoint, with the split it serves.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub split: ProtocolSplit,
    pub model: SirModel,
    pub step: u64,
}

/// Restores one model per protocol split from a run directory, or from a
/// single checkpoint file for universal protocols.
pub fn load_models(cfg: &Config, ckpt: &Path) -> Result<Vec<LoadedModel>> {
    let splits = splits_for(cfg)?;
    let mut out = Vec::with_capacity(splits.len());
    for (i, split) in splits.into_iter().enumerate() {
        let path = if ckpt.is_dir() {
            checkpoint_path(ckpt, cfg, &split.name)
        } else if cfg.protocol.is_universal() {
            ckpt.to_path_buf()
        } else {
            return Err(SirError::Config(
                "specialized protocols need a run directory holding checkpoints/<domain>.ckpt".into(),
            ));
        };
        let ck = load_checkpoint(&path)?;
        let mut model = SirModel::new(cfg, streams_for(cfg, i).student);
        ck.apply_to(&mut model)?;
        out.push(LoadedModel {
            split,
            model,
            step: ck.meta.as_ref().map_or(0, |m| m.step),
        });
    }
    Ok(out)
}

/// Re-evaluates stored models on the configured test sets.
pub fn evaluate_checkpoints(cfg: &Config, ckpt: &Path) -> Result<RunReport> {
    let mut reports = Vec::new();
    for m in load_models(cfg, ckpt)? {
        let domains = m
            .split
            .tests
            .iter()
            .map(|t| evaluate_domain(&m.model, cfg, t))
            .collect::<Result<Vec<_>>>()?;
        reports.push(ModelReport {
            split: m.split.name.clone(),
            iterations: m.step,
            train_images: m.split.train.iter().map(|s| s.path.display().to_string()).collect(),
            loss: Vec::new(),
            domains,
        });
    }
    Ok(RunReport {
        protocol: cfg.protocol.name(),
        seed: cfg.seed,
        loops: cfg.loops,
        models: reports,
        config: cfg.echo(),
    })
}

/// The ablation table and the individual runs behind it.
#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub table: AblationTable,
    pub runs: Vec<RunOutput>,
}

/// One independent seeded run per loop count.
pub fn loop_ablation(cfg: &Config, l_values: &[usize]) -> Result<AblationOutput> {
    if l_values.is_empty() {
        return Err(SirError::Config("loop ablation needs at least one L value".into()));
    }
    let mut runs = Vec::with_capacity(l_values.len());
    let mut rows = Vec::with_capacity(l_values.len());
    let mut domains: Option<Vec<String>> = None;
    for &l in l_values {
        let run_cfg = Config { loops: l, ..cfg.clone() };
        let out = run_protocol(&run_cfg)?;
        let pairs = out.report.domain_aurocs();
        let names: Vec<String> = pairs.iter().map(|(d, _)| d.clone()).collect();
        match &domains {
            None => domains = Some(names),
            Some(d) if *d != names => {
                return Err(SirError::Config("ablation runs disagree on the domain list".into()));
            }
            Some(_) => {}
        }
        let auroc: Vec<f64> = pairs.into_iter().map(|(_, v)| v).collect();
        rows.push(AblationRow {
            loops: l,
            average: mean(&auroc),
            auroc,
        });
        runs.push(out);
    }
    Ok(AblationOutput {
        table: AblationTable {
            protocol: cfg.protocol.name(),
            seed: cfg.seed,
            domains: domains.unwrap_or_default(),
            rows,
        },
        runs,
    })
}

/// Writes `ablation.toml`, `ablation.txt` and each run under `L<l>/`.
pub fn write_ablation(dir: &Path, cfg: &Config, out: &AblationOutput) -> Result<()> {
    write_text(&dir.join("ablation.toml"), &out.table.to_toml())?;
    write_text(&dir.join("ablation.txt"), &out.table.text_table())?;
    for (row, run) in out.table.rows.iter().zip(&out.runs) {
        let run_cfg = Config { loops: row.loops, ..cfg.clone() };
        write_run(&dir.join(format!("L{}", row.loops)), &run_cfg, run)?;
    }
    Ok(())
}
