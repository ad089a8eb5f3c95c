//! Semantic iterative reconstruction for few-shot unsupervised anomaly
//! detection.
//!
//! A frozen convolutional teacher turns an image into a mid-level feature map
//! and a compressed high-level map. A small student decoder goes up from the
//! compressed map to the mid level and back down again, and it repeats that
//! pass `L` times, feeding its own high-level output back in. Training
//! minimizes the summed cosine distance to the teacher features over every
//! loop. At test time the per-location cosine distances of every loop and
//! both levels are upsampled, smoothed, and summed into one anomaly map whose
//! maximum is the image score.
//!
//! Module map:
//!
//! - [`tensor`]: 4-D tensors, convolution kernels, reverse-mode tape
//! - [`nn`]: teacher, student, multi-loop forward pass, training loss
//! - [`optim`]: Adam
//! - [`scoring`]: anomaly maps, AUROC, percentiles
//! - [`data`]: PGM/PPM codec, preprocessing, protocols, synthetic benchmark
//! - [`persist`]: binary checkpoints
//! - [`viz`]: percentile normalization and jet overlays
//! - [`harness`]: training loop, protocol runs, ablations, reports
//! - [`cli`]: command implementations behind the `sir` binary

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod viz;

#[cfg(test)]
mod properties;

pub use config::Config;
pub use error::{ErrorCategory, Result, SirError};
pub use tensor::{Tape, Tensor, Var};
