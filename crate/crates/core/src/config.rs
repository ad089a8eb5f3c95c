//! Run configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Protocol;
use crate::error::{Result, SirError};
use crate::viz::RenderSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of the four teacher stages.
    pub teacher_channels: [usize; 4],
    pub loops: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sigma_smooth: f64,
    pub epsilon_cos: f64,
    pub leaky_slope: f64,
    /// Loss samples are kept every `log_every` iterations (and at the last one).
    pub log_every: usize,
    pub protocol: Protocol,
    pub manifests: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub render: RenderSpec,
}

impl Default for Config {
    /// Desk-scale defaults: 64×64 inputs, 500 iterations.
    fn default() -> Self {
        Config {
            seed: 7,
            image_size: 64,
            channels: 1,
            teacher_channels: [16, 32, 64, 128],
            loops: 3,
            iterations: 500,
            batch_size: 16,
            learning_rate: 1e-4,
            sigma_smooth: 4.0,
            epsilon_cos: crate::tensor::COSINE_EPS,
            leaky_slope: 0.1,
            log_every: 10,
            protocol: Protocol::OneShotUniversal,
            manifests: Vec::new(),
            output_dir: None,
            render: RenderSpec::default(),
        }
    }
}

impl Config {
    /// The published training recipe: 3000 iterations of batch 16 at
    /// learning rate 1e-4, three loops, 128×128 RGB inputs.
    pub fn paper_scale() -> Self {
        Config {
            image_size: 128,
            channels: 3,
            iterations: 3000,
            batch_size: 16,
            learning_rate: 1e-4,
            loops: 3,
            ..Config::default()
        }
    }

    /// A few-hundred-parameter model for gradient checks. Inputs are 32×32
    /// so the compressed map is 2×2; at 1×1 it is mostly padding and the
    /// cosine terms become too ill-conditioned for finite differences.
    pub fn tiny() -> Self {
        Config {
            image_size: 32,
            channels: 1,
            teacher_channels: [2, 3, 2, 3],
            loops: 3,
            batch_size: 2,
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SirError::Config(msg));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return fail(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.teacher_channels.contains(&0) {
            return fail("teacher_channels must all be positive".into());
        }
        if self.loops == 0 {
            return fail("loops must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("sigma_smooth", self.sigma_smooth),
            ("epsilon_cos", self.epsilon_cos),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope));
        }
        if let Protocol::KShotUniversal { k: 0 } = self.protocol {
            return fail("k_shot_universal needs k >= 1".into());
        }
        self.render.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| SirError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative manifest paths are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SirError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut cfg.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config with output placement stripped, as embedded in reports and
    /// checkpoints so they do not depend on where a run was written.
    pub fn echo(&self) -> Config {
        Config {
            output_dir: None,
            ..self.clone()
        }
    }

    /// Writes the resolved configuration beside a command's outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| SirError::io(dir, e))?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml_string()).map_err(|e| SirError::io(&path, e))?;
        Ok(path)
    }
}
