//! Heatmap overlays: global percentile normalization, a jet colormap and
//! alpha blending onto the grayscale input.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{encode_rgb8, LUMA};
use crate::error::{Result, SirError};
use crate::scoring::percentile;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    pub p_lo: f64,
    pub p_hi: f64,
    /// Weight of the colormap; `1 − alpha` goes to the grayscale image.
    pub alpha: f64,
    pub colormap: Colormap,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            p_lo: 20.0,
            p_hi: 95.0,
            alpha: 0.5,
            colormap: Colormap::Jet,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_lo && self.p_lo < self.p_hi && self.p_hi <= 100.0) {
            return Err(SirError::Config(format!(
                "render percentiles need 0 <= p_lo < p_hi <= 100, got {} and {}",
                self.p_lo, self.p_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SirError::Config(format!("render alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The low and high percentile over every value of every map.
pub fn global_range(maps: &[Tensor], spec: &RenderSpec) -> Result<(f64, f64)> {
    if maps.iter().all(|m| m.numel() == 0) {
        return Err(SirError::invalid("normalize_maps", "no map values"));
    }
    let all: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok((percentile(&all, spec.p_lo)?, percentile(&all, spec.p_hi)?))
}

/// `clamp((v − lo) / (hi − lo), 0, 1)`; everything maps to 0 when `hi == lo`.
pub fn normalize_value(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        0.0
    } else {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Rescales a whole test set of maps with shared global percentiles.
pub fn normalize_maps(maps: &[Tensor], spec: &RenderSpec) -> Result<Vec<Tensor>> {
    let (lo, hi) = global_range(maps, spec)?;
    Ok(maps.iter().map(|m| m.map(|v| normalize_value(v, lo, hi))).collect())
}

/// `(value, rgb)` control points of the jet ramp.
pub const JET_KNOTS: [(f64, [f64; 3]); 6] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.0, [0.5, 0.0, 0.0]),
];

/// Piecewise-linear jet; inputs are clamped to `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in JET_KNOTS.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i]));
        }
    }
    JET_KNOTS[5].1
}

impl Colormap {
    pub fn apply(self, v: f64) -> [f64; 3] {
        match self {
            Colormap::Jet => jet(v),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blends a normalized `1×1×H×W` map over a `1×c×H×W` image, returning P6 bytes.
pub fn render_overlay(image: &Tensor, normalized: &Tensor, spec: &RenderSpec) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(SirError::shape(
            "render_overlay",
            format!("expected a 1×1×H×W or 1×3×H×W image, got {:?}", image.shape()),
        ));
    }
    if normalized.shape() != [1, 1, h, w] {
        return Err(SirError::shape(
            "render_overlay",
            format!("map {:?} does not match image extent {h}×{w}", normalized.shape()),
        ));
    }
    let plane = h * w;
    let px = image.data();
    let mut rgb = Vec::with_capacity(plane * 3);
    for (i, &m) in normalized.data().iter().enumerate() {
        let gray = if c == 1 {
            px[i]
        } else {
            LUMA[0] * px[i] + LUMA[1] * px[plane + i] + LUMA[2] * px[2 * plane + i]
        };
        let color = spec.colormap.apply(m);
        for ch in color {
            rgb.push(quantize(spec.alpha * ch + (1.0 - spec.alpha) * gray));
        }
    }
    encode_rgb8(w, h, &rgb)
}

/// `<dir>/<dataset>/<sample>__loop<k>.ppm`, or `__final` when `loop_index` is `None`.
pub fn overlay_path(dir: &Path, dataset: &str, sample: &str, loop_index: Option<usize>) -> PathBuf {
    let tag = match loop_index {
        Some(k) => format!("loop{k}"),
        None => "final".to_string(),
    };
    dir.join(dataset).join(format!("{sample}__{tag}.ppm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode;

    fn alpha(a: f64) -> RenderSpec {
        RenderSpec {
            alpha: a,
            ..RenderSpec::default()
        }
    }

    #[test]
    fn knots_are_hit_exactly() {
        for (v, c) in JET_KNOTS {
            assert_eq!(jet(v), c);
        }
        assert_eq!(jet(0.25), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn zero_and_one_maps_at_full_alpha() {
        let img = Tensor::full([1, 1, 2, 3], 0.7);
        let bytes = render_overlay(&img, &Tensor::zeros([1, 1, 2, 3]), &alpha(1.0)).unwrap();
        let t = decode(&bytes).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 128]);
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        let bytes = render_overlay(&img, &Tensor::full([1, 1, 2, 3], 1.0), &alpha(1.0)).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 0, 0]);
    }

    #[test]
    fn zero_alpha_is_grayscale() {
        let img = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64 / 15.0);
        let map = Tensor::from_fn([1, 1, 4, 4], |_, _, y, _| y as f64 / 3.0);
        let bytes = render_overlay(&img, &map, &alpha(0.0)).unwrap();
        let t = decode(&bytes).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let expected = (img.data()[i] * 255.0).round() / 255.0;
                assert_eq!(t.data()[c * 16 + i], expected);
            }
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let img = Tensor::zeros([1, 1, 4, 4]);
        assert!(render_overlay(&img, &Tensor::zeros([1, 1, 4, 5]), &RenderSpec::default()).is_err());
    }

    #[test]
    fn normalization_endpoints_and_degenerate() {
        let maps = vec![Tensor::from_fn([1, 1, 1, 101], |_, _, _, x| x as f64)];
        let n = normalize_maps(&maps, &RenderSpec::default()).unwrap();
        assert_eq!(n[0].data()[20], 0.0);
        assert_eq!(n[0].data()[95], 1.0);
        assert_eq!(n[0].data()[50], 30.0 / 75.0);
        let flat = vec![Tensor::full([1, 1, 3, 3], 2.5); 2];
        let n = normalize_maps(&flat, &RenderSpec::default()).unwrap();
        assert!(n.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(normalize_maps(&[], &RenderSpec::default()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(RenderSpec::default().validate().is_ok());
        assert!(RenderSpec { p_lo: 95.0, p_hi: 20.0, ..RenderSpec::default() }.validate().is_err());
        assert!(alpha(1.5).validate().is_err());
    }

    #[test]
    fn overlay_naming() {
        let p = overlay_path(Path::new("out"), "grid", "anomalous_003", Some(2));
        assert_eq!(p, Path::new("out/grid/anomalous_003__loop2.ppm"));
        let p = overlay_path(Path::new("out"), "grid", "normal_000", None);
        assert_eq!(p, Path::new("out/grid/normal_000__final.ppm"));
    }
}
