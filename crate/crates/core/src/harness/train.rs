//! The optimization loop over cached teacher features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{preprocess, load_image, SampleRef};
use crate::error::{Result, SirError};
use crate::nn::{SirModel, TeacherFeatures};
use crate::optim::{AdamConfig, AdamState};
use crate::persist::{Checkpoint, CheckpointMeta};
use crate::rng;
use crate::tensor::Tensor;

/// Random streams used by one model of a protocol.
///
/// Model 0 of a universal run uses the base streams; specialized model `i`
/// is shifted by `MODEL_OFFSET · (i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStreams {
    pub student: u64,
    pub batch: u64,
}

impl ModelStreams {
    pub fn base() -> Self {
        ModelStreams {
            student: rng::STUDENT,
            batch: rng::BATCH,
        }
    }

    pub fn specialized(index: usize) -> Self {
        let off = rng::MODEL_OFFSET * (index as u64 + 1);
        ModelStreams {
            student: rng::STUDENT + off,
            batch: rng::BATCH + off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step: u64,
    pub loss: f64,
}

/// Student training on a fixed set of normal images.
///
/// Teacher features are computed once per image; each step draws
/// `batch_size` indices uniformly with replacement.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SirModel,
    pub adam: AdamState,
    features: Vec<TeacherFeatures>,
    batch_rng: ChaCha8Rng,
    batch_size: usize,
    seed: u64,
    split: String,
    step: u64,
}

/// Loads and preprocesses training images in order.
pub fn load_train_images(cfg: &Config, train: &[SampleRef]) -> Result<Vec<Tensor>> {
    train
        .iter()
        .map(|s| preprocess(&load_image(&s.path)?, cfg.image_size, cfg.channels))
        .collect()
}

impl Trainer {
    /// A freshly initialized model for `images`.
    pub fn new(cfg: &Config, split: &str, images: &[Tensor], streams: ModelStreams) -> Result<Self> {
        let model = SirModel::new(cfg, streams.student);
        Self::with_model(cfg, split, images, streams, model)
    }

    /// Trains a given model, e.g. one holding an externally supplied teacher.
    pub fn with_model(cfg: &Config, split: &str, images: &[Tensor], streams: ModelStreams, model: SirModel) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(SirError::Config(format!("split {split}: empty training set")));
        }
        let features = images
            .iter()
            .map(|img| model.teacher_forward(img))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), model.student.parameters());
        Ok(Trainer {
            model,
            adam,
            features,
            batch_rng: rng::stream(cfg.seed, streams.batch),
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            split: split.to_string(),
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &Config, images: &[Tensor], streams: ModelStreams, ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .meta
            .as_ref()
            .ok_or_else(|| SirError::Checkpoint("no run metadata to resume from".into()))?;
        if meta.seed != cfg.seed {
            return Err(SirError::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                meta.seed, cfg.seed
            )));
        }
        let mut model = SirModel::new(cfg, streams.student);
        ckpt.apply_to(&mut model)?;
        let mut t = Self::with_model(cfg, &meta.split, images, streams, model)?;
        t.adam = ckpt.adam_state(&t.model, AdamConfig::with_lr(cfg.learning_rate))?;
        let pos: u128 = meta
            .batch_rng_word_pos
            .parse()
            .map_err(|_| SirError::Checkpoint(format!("bad stream position {:?}", meta.batch_rng_word_pos)))?;
        t.batch_rng.set_word_pos(pos);
        t.step = meta.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    /// One Adam step on a freshly sampled batch; returns the batch loss
    /// before the update.
    pub fn step(&mut self) -> Result<f64> {
        let n = self.features.len();
        let picks: Vec<&TeacherFeatures> = (0..self.batch_size)
            .map(|_| &self.features[self.batch_rng.random_range(0..n)])
            .collect();
        let batch = TeacherFeatures::stack(&picks)?;
        let out = self.model.loss_and_grads(&batch)?;
        if !out.loss.is_finite() {
            return Err(SirError::invalid("train", format!("non-finite loss at step {}", self.step + 1)));
        }
        let mut params = self.model.student.parameters_mut();
        self.adam.step(&mut params, &out.grads)?;
        self.step += 1;
        Ok(out.loss)
    }

    /// Runs until `iterations` total steps, sampling the loss every
    /// `log_every` steps and at the last one.
    pub fn run(&mut self, iterations: u64, log_every: u64) -> Result<Vec<LossSample>> {
        let mut samples = Vec::new();
        while self.step < iterations {
            let loss = self.step()?;
            if self.step % log_every == 0 || self.step == iterations {
                samples.push(LossSample { step: self.step, loss });
            }
        }
        Ok(samples)
    }

    pub fn checkpoint(&self, cfg: &Config) -> Checkpoint {
        let meta = CheckpointMeta {
            seed: self.seed,
            step: self.step,
            batch_rng_word_pos: self.batch_rng.get_word_pos().to_string(),
            split: self.split.clone(),
        };
        Checkpoint::capture(&self.model, Some(&self.adam), Some(cfg), Some(meta))
    }
}
