//! Image ingestion, dataset manifests, training protocols and the synthetic
//! benchmark generator.

mod netpbm;
mod protocol;
mod synth;

pub use netpbm::{decode, encode, encode_rgb8, load_image, save_image};
pub use protocol::{build_protocol, DomainTest, Protocol, ProtocolSplit, SampleRef};
pub use synth::{synth_benchmark, synth_domain, DefectKind, DomainImages, Family, SynthSpec};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SirError};
use crate::scoring::Label;
use crate::tensor::{bilinear_resize, Tensor};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A preprocessed image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Tensor,
    pub domain: String,
    pub label: Label,
    pub source: PathBuf,
}

/// Resizes to `size × size` and adapts the channel count.
///
/// Three channels collapse to one by luma; one channel is replicated to
/// three. Values stay in `[0, 1]`.
pub fn preprocess(img: &Tensor, size: usize, channels: usize) -> Result<Tensor> {
    let [n, c, h, w] = img.shape();
    if n != 1 {
        return Err(SirError::invalid("preprocess", format!("expected one image, got {n}")));
    }
    let adapted = match (c, channels) {
        (a, b) if a == b => img.clone(),
        (3, 1) => {
            let plane = h * w;
            let d = img.data();
            let data = (0..plane)
                .map(|i| (LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]).clamp(0.0, 1.0))
                .collect();
            Tensor::new([1, 1, h, w], data)?
        }
        (1, 3) => Tensor::from_fn([1, 3, h, w], |_, _, y, x| img.at(0, 0, y, x)),
        (a, b) => {
            return Err(SirError::invalid(
                "preprocess",
                format!("cannot adapt {a} channels to {b}"),
            ))
        }
    };
    let resized = bilinear_resize(&adapted, size, size)?;
    Ok(resized.map(|v| v.clamp(0.0, 1.0)))
}

/// Loads and preprocesses one image file.
pub fn load_sample(path: &Path, domain: &str, label: Label, size: usize, channels: usize) -> Result<SampleRecord> {
    let raw = load_image(path)?;
    Ok(SampleRecord {
        image: preprocess(&raw, size, channels)?,
        domain: domain.to_string(),
        label,
        source: path.to_path_buf(),
    })
}

/// One domain's file lists. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub domain: String,
    pub train_normal: Vec<PathBuf>,
    pub test_normal: Vec<PathBuf>,
    pub test_anomalous: Vec<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SirError::io(path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| SirError::Config(format!("{}: {}", path.display(), e.message())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| SirError::io(path, e))
    }

    /// Absolute (or CWD-relative) location of a listed path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Training lists must hold only normals.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.train_normal.iter().find(|p| self.test_anomalous.contains(p)) {
            return Err(SirError::Config(format!(
                "domain {}: {} is listed both as a training normal and as an anomaly",
                self.domain,
                p.display()
            )));
        }
        Ok(())
    }
}

pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>> {
    if paths.is_empty() {
        return Err(SirError::Config("no manifests configured".into()));
    }
    paths.iter().map(|p| DatasetManifest::load(p)).collect()
}
