//! Seeded multi-domain benchmark with injected defects.
//!
//! Each domain draws its normals from one appearance family with
//! domain-level parameters fixed by the seed and per-image jitter. Anomalies
//! are fresh normals with one local defect whose strength is scaled by
//! `contrast`; at contrast 0 an anomaly is pixel-identical to its base.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{save_image, DatasetManifest};
use crate::error::{Result, SirError};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Sum of a few oriented sinusoids.
    Texture,
    /// Periodic grid lines over a soft gradient.
    Grid,
    /// Tinted radial falloff with rings, written as color.
    Radial,
}

impl Family {
    const ALL: [Family; 3] = [Family::Texture, Family::Grid, Family::Radial];

    pub fn name(self) -> &'static str {
        match self {
            Family::Texture => "texture",
            Family::Grid => "grid",
            Family::Radial => "radial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Additive Gaussian bump.
    Blob,
    /// Rectangle pulled toward a flat fill value.
    Occlusion,
    /// Disk blended toward a foreign high-frequency pattern.
    TextureSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub domains: usize,
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalies: usize,
    pub size: usize,
    /// Defect strength in `[0, 1]`.
    pub contrast: f64,
    pub defect_radius: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-image departure from the domain's canonical pattern, in `[0, 1]`:
    /// wave phases, grid offsets and tilt, radial center.
    pub jitter: f64,
    /// Defect kinds, cycled over the anomalies of a domain.
    pub defects: Vec<DefectKind>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            domains: 3,
            train_normals: 20,
            test_normals: 50,
            test_anomalies: 50,
            size: 64,
            contrast: 1.0,
            defect_radius: 6.0,
            noise: 0.02,
            jitter: 0.05,
            defects: vec![DefectKind::Blob, DefectKind::Occlusion, DefectKind::TextureSwap],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SirError::Config(format!("synthetic benchmark: {m}")));
        if self.domains == 0 {
            return fail("at least one domain is required");
        }
        if self.test_anomalies == 0 {
            return fail("test_anomalies must be positive");
        }
        if self.train_normals == 0 || self.test_normals == 0 {
            return fail("train_normals and test_normals must be positive");
        }
        if self.size < 16 {
            return fail("size must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return fail("contrast must be in [0, 1]");
        }
        if !(self.defect_radius > 0.0) || self.defect_radius * 2.0 + 2.0 >= self.size as f64 {
            return fail("defect_radius must be positive and fit inside the image");
        }
        if self.defects.is_empty() {
            return fail("at least one defect kind is required");
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return fail("jitter must be in [0, 1]");
        }
        Ok(())
    }

    pub fn family(&self, domain: usize) -> Family {
        Family::ALL[domain % Family::ALL.len()]
    }

    pub fn domain_name(&self, domain: usize) -> String {
        let base = self.family(domain).name();
        match domain / Family::ALL.len() {
            0 => base.to_string(),
            k => format!("{base}_{k}"),
        }
    }
}

/// Domain-level appearance parameters.
#[derive(Debug, Clone)]
enum Appearance {
    /// `(fx, fy, amplitude, phase)` per wave.
    Texture { waves: Vec<(f64, f64, f64, f64)> },
    Grid { spacing: f64, width: f64, line: f64, background: f64, offset: (f64, f64) },
    Radial { tint: [f64; 3], ring_period: f64, falloff: f64 },
}

impl Appearance {
    fn draw(family: Family, rng: &mut impl Rng) -> Self {
        match family {
            Family::Texture => Appearance::Texture {
                waves: (0..5)
                    .map(|_| {
                        let cycles = rng.random_range(2.0..6.0);
                        let angle = rng.random_range(0.0..PI);
                        let amp = rng.random_range(0.5..1.0);
                        let phase = rng.random_range(0.0..2.0 * PI);
                        (cycles * angle.cos(), cycles * angle.sin(), amp, phase)
                    })
                    .collect(),
            },
            Family::Grid => {
                let spacing = rng.random_range(7.0..11.0);
                Appearance::Grid {
                    spacing,
                    width: rng.random_range(1.0..2.0),
                    line: rng.random_range(0.75..0.9),
                    background: rng.random_range(0.2..0.35),
                    offset: (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing)),
                }
            }
            Family::Radial => Appearance::Radial {
                tint: [rng.random_range(0.7..1.0), rng.random_range(0.4..0.8), rng.random_range(0.2..0.6)],
                ring_period: rng.random_range(5.0..9.0),
                falloff: rng.random_range(0.35..0.5),
            },
        }
    }

    fn channels(&self) -> usize {
        match self {
            Appearance::Radial { .. } => 3,
            _ => 1,
        }
    }

    /// One normal image, `1×c×size×size`. `jitter` in `[0, 1]` scales the
    /// per-image departure from the domain's canonical pattern.
    fn normal(&self, size: usize, noise: f64, jitter: f64, rng: &mut impl Rng) -> Tensor {
        let s = size as f64;
        let mut wobble = |scale: f64| jitter * scale * rng.random_range(-1.0..1.0);
        let base: Vec<f64> = match self {
            Appearance::Texture { waves } => {
                let phases: Vec<f64> = waves.iter().map(|w| w.3 + wobble(PI)).collect();
                let norm: f64 = waves.iter().map(|w| w.2).sum();
                (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64 / s, (i % size) as f64 / s);
                        let v: f64 = waves
                            .iter()
                            .zip(&phases)
                            .map(|(&(fx, fy, a, _), &ph)| a * (2.0 * PI * (fx * x + fy * y) + ph).cos())
                            .sum();
                        0.5 + 0.35 * v / norm
                    })
                    .collect()
            }
            Appearance::Grid { spacing, width, line, background, offset } => {
                let (oy, ox) = (offset.0 + wobble(*spacing / 2.0), offset.1 + wobble(*spacing / 2.0));
                let tilt = wobble(0.2);
                (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64, (i % size) as f64);
                        // Raised-cosine line profile, so sub-pixel offsets
                        // change the image continuously.
                        let weight = |p: f64, o: f64| {
                            let d = (p + o).rem_euclid(*spacing);
                            let d = d.min(spacing - d) / width;
                            if d >= 1.0 {
                                0.0
                            } else {
                                0.5 * (1.0 + (PI * d).cos())
                            }
                        };
                        let bg = background + tilt * (y - s / 2.0) / s;
                        bg + weight(y, oy).max(weight(x, ox)) * (line - bg)
                    })
                    .collect()
            }
            Appearance::Radial { ring_period, falloff, .. } => {
                let (cy, cx) = (s / 2.0 + wobble(s / 4.0), s / 2.0 + wobble(s / 4.0));
                (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64, (i % size) as f64);
                        let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / (s / 2.0);
                        0.8 - falloff * r.min(1.2) + 0.08 * (2.0 * PI * r * s / 2.0 / ring_period).cos()
                    })
                    .collect()
            }
        };
        let c = self.channels();
        let tint = match self {
            Appearance::Radial { tint, .. } => *tint,
            _ => [1.0; 3],
        };
        Tensor::from_fn([1, c, size, size], |_, ch, y, x| {
            let z: f64 = rng.sample(StandardNormal);
            (base[y * size + x] * tint[ch] + noise * z).clamp(0.0, 1.0)
        })
    }
}

/// Geometry of one defect, drawn independently of its strength.
#[derive(Debug, Clone, Copy)]
struct Defect {
    kind: DefectKind,
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    /// Distance of an occlusion's fill from the extreme opposite the local
    /// intensity.
    fill: f64,
    period: f64,
}

impl Defect {
    fn draw(kind: DefectKind, size: usize, radius: f64, rng: &mut impl Rng) -> Self {
        let lo = radius + 1.0;
        let hi = size as f64 - radius - 1.0;
        Defect {
            kind,
            cy: rng.random_range(lo..hi),
            cx: rng.random_range(lo..hi),
            half_h: rng.random_range(0.6 * radius..radius),
            half_w: rng.random_range(0.6 * radius..radius),
            fill: rng.random_range(0.0..0.15),
            period: rng.random_range(2.5..4.0),
        }
    }

    /// Mean intensity over the defect's bounding box, all channels.
    fn local_mean(&self, img: &Tensor) -> f64 {
        let [_, c, h, w] = img.shape();
        let (mut sum, mut count) = (0.0, 0usize);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if (y as f64 - self.cy).abs() <= self.half_h && (x as f64 - self.cx).abs() <= self.half_w {
                        sum += img.at(0, ch, y, x);
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            0.5
        } else {
            sum / count as f64
        }
    }

    /// Defects push away from the local intensity so that a full-strength
    /// defect is never hidden by saturation.
    fn apply(&self, img: &Tensor, radius: f64, contrast: f64) -> Tensor {
        let mut out = img.clone();
        let [_, c, h, w] = img.shape();
        let sigma = radius / 2.0;
        let bright = self.local_mean(img) > 0.5;
        let sign = if bright { -1.0 } else { 1.0 };
        let fill = if bright { self.fill } else { 1.0 - self.fill };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
                    let v = img.at(0, ch, y, x);
                    let delta = match self.kind {
                        DefectKind::Blob => {
                            let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                            sign * g
                        }
                        DefectKind::Occlusion => {
                            if dy.abs() <= self.half_h && dx.abs() <= self.half_w {
                                fill - v
                            } else {
                                0.0
                            }
                        }
                        DefectKind::TextureSwap => {
                            if dy * dy + dx * dx <= radius * radius {
                                let stripes = (2.0 * PI * (dx + dy) / self.period).sin();
                                let foreign = if stripes >= 0.0 { 0.9 } else { 0.1 };
                                foreign - v
                            } else {
                                0.0
                            }
                        }
                    };
                    let idx = out.index(0, ch, y, x);
                    out.data_mut()[idx] = (v + contrast * delta).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// All images of one domain, in memory.
#[derive(Debug, Clone)]
pub struct DomainImages {
    pub name: String,
    pub train_normal: Vec<Tensor>,
    pub test_normal: Vec<Tensor>,
    /// `(base normal, defected image)` pairs.
    pub test_anomalous: Vec<(Tensor, Tensor)>,
}

/// Generates one domain without touching the filesystem.
pub fn synth_domain(spec: &SynthSpec, domain: usize, seed: u64) -> Result<DomainImages> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::SYNTH_BASE + domain as u64);
    let look = Appearance::draw(spec.family(domain), &mut rng);
    let normals = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor> {
        (0..n).map(|_| look.normal(spec.size, spec.noise, spec.jitter, rng)).collect()
    };
    let train_normal = normals(spec.train_normals, &mut rng);
    let test_normal = normals(spec.test_normals, &mut rng);
    let mut test_anomalous = Vec::with_capacity(spec.test_anomalies);
    for i in 0..spec.test_anomalies {
        let base = look.normal(spec.size, spec.noise, spec.jitter, &mut rng);
        let kind = spec.defects[i % spec.defects.len()];
        let defect = Defect::draw(kind, spec.size, spec.defect_radius, &mut rng);
        let img = defect.apply(&base, spec.defect_radius, spec.contrast);
        test_anomalous.push((base, img));
    }
    Ok(DomainImages {
        name: spec.domain_name(domain),
        train_normal,
        test_normal,
        test_anomalous,
    })
}

fn write_set(out_dir: &Path, rel_dir: &str, stem: &str, images: &[&Tensor]) -> Result<Vec<PathBuf>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let ext = if img.shape()[1] == 3 { "ppm" } else { "pgm" };
            let rel = PathBuf::from(rel_dir).join(format!("{stem}_{i:03}.{ext}"));
            save_image(&out_dir.join(&rel), img)?;
            Ok(rel)
        })
        .collect()
}

/// Writes every domain's images plus one `<domain>.toml` manifest per domain
/// under `out_dir`, and returns the manifests.
pub fn synth_benchmark(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| SirError::io(out_dir, e))?;
    let mut manifests = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let imgs = synth_domain(spec, d, seed)?;
        let name = imgs.name.clone();
        let train: Vec<&Tensor> = imgs.train_normal.iter().collect();
        let normal: Vec<&Tensor> = imgs.test_normal.iter().collect();
        let anomalous: Vec<&Tensor> = imgs.test_anomalous.iter().map(|(_, a)| a).collect();
        let manifest = DatasetManifest {
            train_normal: write_set(out_dir, &format!("{name}/train"), "normal", &train)?,
            test_normal: write_set(out_dir, &format!("{name}/test"), "normal", &normal)?,
            test_anomalous: write_set(out_dir, &format!("{name}/test"), "anomalous", &anomalous)?,
            domain: name.clone(),
            base_dir: out_dir.to_path_buf(),
        };
        manifest.save(&out_dir.join(format!("{name}.toml")))?;
        manifests.push(manifest);
    }
    let spec_path = out_dir.join("synth_spec.toml");
    let text = format!("seed = {seed}\n{}", toml::to_string(spec).expect("spec serializes"));
    std::fs::write(&spec_path, text).map_err(|e| SirError::io(&spec_path, e))?;
    Ok(manifests)
}
