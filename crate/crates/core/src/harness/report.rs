//! Report documents and their plain-text tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::LossSample;
use crate::config::Config;
use crate::error::{Result, SirError};
use crate::scoring::Label;

/// One AUROC row. Rows are `loop{k}.f3`, `loop{k}.phi`, `loop{k}.fused` for
/// every loop, then `final_fused`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub row: String,
    pub auroc: f64,
}

pub const FINAL_ROW: &str = "final_fused";

pub fn row_names(loops: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=loops)
        .flat_map(|k| ["f3", "phi", "fused"].map(|s| format!("loop{k}.{s}")))
        .collect();
    names.push(FINAL_ROW.to_string());
    names
}

fn pretty_row(name: &str) -> String {
    if name == FINAL_ROW {
        return "Final fused sum".to_string();
    }
    let (lp, scale) = name.split_once('.').unwrap_or((name, ""));
    let k = lp.trim_start_matches("loop");
    let scale = match scale {
        "phi" => "φ",
        other => other,
    };
    format!("Loop {k} {scale}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub file: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    /// Image-level AUROC of `max(A_final)`.
    pub auroc_final: f64,
    pub rows: Vec<AurocRow>,
    pub images: Vec<ImageRecord>,
}

impl DomainReport {
    pub fn row(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.row == name).map(|r| r.auroc)
    }

    /// Highest `loop{k}.fused` AUROC.
    pub fn best_single_loop_fused(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.row.ends_with(".fused"))
            .map(|r| r.auroc)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scores(&self, label: Label) -> Vec<f64> {
        self.images.iter().filter(|i| i.label == label).map(|i| i.score).collect()
    }
}

/// One trained model and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub split: String,
    pub iterations: u64,
    pub train_images: Vec<String>,
    pub loss: Vec<LossSample>,
    pub domains: Vec<DomainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: String,
    pub seed: u64,
    pub loops: usize,
    pub models: Vec<ModelReport>,
    pub config: Config,
}

impl RunReport {
    /// `(domain, final fused AUROC)` in evaluation order.
    pub fn domain_aurocs(&self) -> Vec<(String, f64)> {
        self.domains().map(|d| (d.domain.clone(), d.auroc_final)).collect()
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainReport> {
        self.models.iter().flat_map(|m| &m.domains)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains().find(|d| d.domain == name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SirError::Config(format!("report: {}", e.message())))
    }

    /// Per-loop and fusion AUROC table: rows as in [`row_names`], one column
    /// per domain, trailing average.
    pub fn fusion_table(&self) -> String {
        let domains: Vec<&DomainReport> = self.domains().collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Per-loop and fusion image-level AUROC (%), L = {}, protocol {}, seed {}",
            self.loops, self.protocol, self.seed
        );
        let mut header = format!("{:<18}", "");
        for d in &domains {
            let _ = write!(header, "{:>12}", d.domain);
        }
        let _ = write!(header, "{:>12}", "Average");
        let _ = writeln!(out, "{header}");
        for name in row_names(self.loops) {
            let vals: Vec<f64> = domains.iter().map(|d| d.row(&name).unwrap_or(f64::NAN)).collect();
            let mut line = format!("{:<18}", pretty_row(&name));
            for v in &vals {
                let _ = write!(line, "{:>12.2}", 100.0 * v);
            }
            let _ = write!(line, "{:>12.2}", 100.0 * mean(&vals));
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Wall-clock timings, kept out of the report so reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub splits: Vec<SplitTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTiming {
    pub split: String,
    pub iterations: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Loop-count ablation: one row per `L`, one column per domain, plus the
/// row average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub protocol: String,
    pub seed: u64,
    pub domains: Vec<String>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loops: usize,
    pub auroc: Vec<f64>,
    pub average: f64,
}

impl AblationTable {
    pub fn row(&self, loops: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.loops == loops)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ablation table serializes")
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Ablation on the number of loops, image-level AUROC (%), protocol {}, seed {}",
            self.protocol, self.seed
        );
        let mut header = format!("{:<6}", "L");
        for d in &self.domains {
            let _ = write!(header, "{:>12}", d);
        }
        let _ = writeln!(out, "{header}{:>12}", "Average");
        for r in &self.rows {
            let mut line = format!("{:<6}", r.loops);
            for v in &r.auroc {
                let _ = write!(line, "{:>12.2}", 100.0 * v);
            }
            let _ = writeln!(out, "{line}{:>12.2}", 100.0 * r.average);
        }
        out
    }
}
