//! Anomaly maps, image scores, AUROC and percentiles.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SirError};
use crate::nn::{LoopOutput, SirModel, TeacherFeatures};
use crate::tensor::{bilinear_resize, cosine_distance_map, gaussian_smooth, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Normal => Label::Anomalous,
            Label::Anomalous => Label::Normal,
        }
    }
}

/// Smoothed, image-resolution distance maps of one loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMaps {
    pub f3: Tensor,
    pub phi: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// `A^l = f3 map + φ map` for each loop.
    pub per_loop_maps: Vec<Tensor>,
    pub per_scale_maps: Vec<ScaleMaps>,
    /// Sum of all per-loop maps.
    pub final_map: Tensor,
    /// `max(final_map)`.
    pub score: f64,
}

/// Image-level scores derived from one [`AnomalyResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    /// Per loop: `(f3 only, φ only, fused)`.
    pub per_loop: Vec<[f64; 3]>,
    pub final_fused: f64,
}

impl AnomalyResult {
    pub fn scores(&self) -> ImageScores {
        ImageScores {
            per_loop: self
                .per_scale_maps
                .iter()
                .zip(&self.per_loop_maps)
                .map(|(s, fused)| [s.f3.max(), s.phi.max(), fused.max()])
                .collect(),
            final_fused: self.score,
        }
    }
}

fn scale_map(student: &Tensor, teacher: &Tensor, out_hw: (usize, usize), sigma: f64, eps: f64) -> Result<Tensor> {
    let dist = cosine_distance_map(student, teacher, eps)?;
    let up = bilinear_resize(&dist, out_hw.0, out_hw.1)?;
    gaussian_smooth(&up, sigma)
}

/// Builds every map from teacher targets and student outputs of one image.
pub fn anomaly_maps_from_features(
    teacher: &TeacherFeatures,
    outputs: &[LoopOutput],
    out_hw: (usize, usize),
    sigma: f64,
    eps: f64,
) -> Result<AnomalyResult> {
    if teacher.phi.shape()[0] != 1 {
        return Err(SirError::invalid(
            "anomaly_maps",
            format!("expected a single image, got batch of {}", teacher.phi.shape()[0]),
        ));
    }
    if outputs.is_empty() {
        return Err(SirError::invalid("anomaly_maps", "no loop outputs"));
    }
    let mut per_loop_maps = Vec::with_capacity(outputs.len());
    let mut per_scale_maps = Vec::with_capacity(outputs.len());
    for out in outputs {
        let f3 = scale_map(&out.f3, &teacher.f3, out_hw, sigma, eps)?;
        let phi = scale_map(&out.phi, &teacher.phi, out_hw, sigma, eps)?;
        per_loop_maps.push(f3.add(&phi)?);
        per_scale_maps.push(ScaleMaps { f3, phi });
    }
    let mut final_map = per_loop_maps[0].clone();
    for m in &per_loop_maps[1..] {
        final_map.add_assign(m)?;
    }
    let score = final_map.max();
    Ok(AnomalyResult {
        per_loop_maps,
        per_scale_maps,
        final_map,
        score,
    })
}

/// Runs the model on one `1×c×H×W` image and builds its anomaly maps.
pub fn anomaly_maps(model: &SirModel, x: &Tensor, sigma: f64) -> Result<AnomalyResult> {
    let [n, _, h, w] = x.shape();
    if n != 1 {
        return Err(SirError::invalid(
            "anomaly_maps",
            format!("expected a single image, got batch of {n}"),
        ));
    }
    let teacher = model.teacher_forward(x)?;
    let outputs = model.loop_forward(&teacher.phi)?;
    anomaly_maps_from_features(&teacher, &outputs, (h, w), sigma, model.epsilon)
}

/// Area under the ROC curve via the Mann–Whitney rank sum, with tied
/// scores counted as half.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SirError::invalid(
            "auroc",
            format!("{} scores but {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SirError::invalid("auroc", "NaN score"));
    }
    let n_anom = labels.iter().filter(|&&l| l == Label::Anomalous).count() as u64;
    let n_norm = labels.len() as u64 - n_anom;
    if n_anom == 0 || n_norm == 0 {
        return Err(SirError::UndefinedAuroc(format!(
            "need both classes, got {n_norm} normal and {n_anom} anomalous"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the midrank of each tie group keeps the rank sum an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u64;
        let anomalies_in_group = order[i..j].iter().filter(|&&k| labels[k] == Label::Anomalous).count() as u64;
        twice_rank_sum += twice_midrank * anomalies_in_group;
        i = j;
    }
    let twice_u = twice_rank_sum - n_anom * (n_anom + 1);
    Ok(twice_u as f64 / (2 * n_anom * n_norm) as f64)
}

/// Linear-interpolation percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SirError::invalid("percentile", "empty input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(SirError::invalid("percentile", format!("p = {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(SirError::invalid("percentile", "NaN value"));
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let mut buf = values.to_vec();
    let (_, &mut lo_val, upper) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    let hi_val = if hi == lo {
        lo_val
    } else {
        upper.iter().copied().min_by(f64::total_cmp).expect("hi index is in range")
    };
    Ok(lo_val + (rank - lo as f64) * (hi_val - lo_val))
}
