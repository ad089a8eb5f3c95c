//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SIRCKPT1" (last byte is the format version)
//! count        u32      number of tensor entries
//! entry × count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8 ("teacher.stage1.weight", "adam.t", ...)
//!   rank       u8
//!   extents    rank × u32
//!   payload    product(extents) × f64, row-major (one value for rank 0)
//! doc_len      u32
//! doc          doc_len bytes, UTF-8 TOML: run metadata and config echo
//! ```
//!
//! Version byte `'1'` means 64-bit payloads. Any other version is rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Result, SirError};
use crate::nn::{SirModel, StudentDecoder};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SIRCKPT";
pub const VERSION: u8 = b'1';

/// A named tensor payload with an arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn from_tensor(t: &Tensor) -> Self {
        Entry {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Entry {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    fn to_tensor(&self, name: &str, expected: [usize; 4]) -> Result<Tensor> {
        if self.shape != expected {
            return Err(SirError::Checkpoint(format!(
                "{name}: stored shape {:?} does not match configured shape {:?}",
                self.shape, expected
            )));
        }
        Tensor::new(expected, self.data.clone())
    }
}

/// Run state stored beside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Completed optimization steps.
    pub step: u64,
    /// Word position of the batch-sampling stream, as a decimal string.
    pub batch_rng_word_pos: String,
    /// Which protocol split this model belongs to.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<CheckpointMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<Config>,
}

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
    pub meta: Option<CheckpointMeta>,
    pub config: Option<Config>,
}

impl Checkpoint {
    /// Collects the model's tensors and, if given, the optimizer state.
    pub fn capture(model: &SirModel, adam: Option<&AdamState>, config: Option<&Config>, meta: Option<CheckpointMeta>) -> Self {
        let mut entries = BTreeMap::new();
        for (name, t) in model.teacher.named_parameters() {
            entries.insert(name, Entry::from_tensor(t));
        }
        let names = StudentDecoder::parameter_names();
        for (name, t) in names.iter().zip(model.student.parameters()) {
            entries.insert(name.clone(), Entry::from_tensor(t));
        }
        if let Some(adam) = adam {
            for (i, name) in names.iter().enumerate() {
                entries.insert(format!("adam.m.{name}"), Entry::from_tensor(&adam.m[i]));
                entries.insert(format!("adam.v.{name}"), Entry::from_tensor(&adam.v[i]));
            }
            entries.insert("adam.t".into(), Entry::scalar(adam.t as f64));
        }
        Checkpoint {
            entries,
            meta,
            config: config.map(Config::echo),
        }
    }

    /// Teacher entries only, the form used to swap in an external backbone.
    pub fn teacher_only(model: &SirModel) -> Self {
        let mut entries = BTreeMap::new();
        for (name, t) in model.teacher.named_parameters() {
            entries.insert(name, Entry::from_tensor(t));
        }
        Checkpoint {
            entries,
            ..Checkpoint::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let doc = Document {
            meta: self.meta.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&doc).expect("checkpoint document serializes");
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if &magic[..7] != MAGIC {
            return Err(SirError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        if magic[7] != VERSION {
            return Err(SirError::Checkpoint(format!(
                "unsupported checkpoint version {:?} (expected {:?})",
                magic[7] as char, VERSION as char
            )));
        }
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u32(&format!("name length of entry {i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("name of entry {i}"))?)
                .map_err(|_| SirError::Checkpoint(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, &format!("rank of {name}"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("extent of {name}"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, &format!("payload of {name}"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if entries.insert(name.clone(), Entry { shape, data }).is_some() {
                return Err(SirError::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        let doc_len = r.u32("document length")? as usize;
        let text = std::str::from_utf8(r.take(doc_len, "document")?)
            .map_err(|_| SirError::Checkpoint("document is not UTF-8".into()))?;
        let doc: Document =
            toml::from_str(text).map_err(|e| SirError::Checkpoint(format!("document: {}", e.message())))?;
        if r.pos != bytes.len() {
            return Err(SirError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            entries,
            meta: doc.meta,
            config: doc.config,
        })
    }

    pub fn teacher_bytes(&self) -> Vec<u8> {
        let teacher = Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with("teacher."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            ..Checkpoint::default()
        };
        teacher.to_bytes()
    }

    /// Overwrites `model`'s tensors with stored ones.
    ///
    /// Teacher entries are required. Student entries are all-or-nothing: a
    /// teacher-only file leaves the student as initialized. The loop count is
    /// not a parameter shape and is taken from the caller's model.
    pub fn apply_to(&self, model: &mut SirModel) -> Result<()> {
        for (name, t) in model.teacher.named_parameters_mut() {
            let e = self
                .entries
                .get(&name)
                .ok_or_else(|| SirError::Checkpoint(format!("missing entry {name}")))?;
            *t = e.to_tensor(&name, t.shape())?;
        }
        let names = StudentDecoder::parameter_names();
        let present = names.iter().filter(|n| self.entries.contains_key(*n)).count();
        if present == 0 {
            return Ok(());
        }
        if present != names.len() {
            return Err(SirError::Checkpoint("student entries are incomplete".into()));
        }
        for (name, t) in names.iter().zip(model.student.parameters_mut()) {
            *t = self.entries[name].to_tensor(name, t.shape())?.with_grad(true);
        }
        Ok(())
    }

    /// Stored optimizer state for `model`, or a fresh one if none is stored.
    pub fn adam_state(&self, model: &SirModel, config: AdamConfig) -> Result<AdamState> {
        let mut state = AdamState::new(config, model.student.parameters());
        let Some(t) = self.entries.get("adam.t") else {
            return Ok(state);
        };
        let step = t.data.first().copied().unwrap_or(0.0);
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(SirError::Checkpoint(format!("adam.t holds invalid step {step}")));
        }
        state.t = step as u64;
        let names = StudentDecoder::parameter_names();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut state.m[i]), ("adam.v.", &mut state.v[i])] {
                let key = format!("{prefix}{name}");
                let e = self
                    .entries
                    .get(&key)
                    .ok_or_else(|| SirError::Checkpoint(format!("missing entry {key}")))?;
                *slot = e.to_tensor(&key, slot.shape())?;
            }
        }
        Ok(state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SirError::Checkpoint(format!(
                "truncated file while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SirError::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| SirError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| SirError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
