//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `BALVAECK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! every tensor's `f32` values in little-endian order. The header carries
//! the model configuration, balancing state, schedule, optimizer counters
//! and an index of `(name, shape, offset)` for the tensors that follow.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BalancingState;
use crate::models::ModelConfig;
use crate::nn::{Adam, AdamSlot, Tensor};
use crate::train::TrainSchedule;

pub const MAGIC: &[u8; 8] = b"BALVAECK";
pub const FORMAT_VERSION: u32 = 1;

/// Adam state for the learned `log γ` scalar.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarMoments {
    pub value: f64,
    pub m: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    First,
    Second,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: ModelConfig,
    pub balancing: BalancingState,
    pub schedule: TrainSchedule,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer hyperparameters and step count; slots are in `adam.slots`.
    pub adam: Adam,
    pub learned_log_gamma: ScalarMoments,
    /// Named parameter tensors in model visiting order.
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form extras (e.g. dataset name, latent moments).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    model: ModelConfig,
    balancing: BalancingState,
    schedule: TrainSchedule,
    epoch: usize,
    adam: Adam,
    learned_log_gamma: ScalarMoments,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
    adam_slots: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut all: Vec<(String, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        for (i, slot) in self.adam.slots.iter().enumerate() {
            all.push((format!("adam.m.{i}"), &slot.m));
            all.push((format!("adam.v.{i}"), &slot.v));
        }
        for (name, t) in &all {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            stage: self.stage,
            model: self.model.clone(),
            balancing: self.balancing.clone(),
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            adam: self.adam.clone(),
            learned_log_gamma: self.learned_log_gamma,
            metadata: self.metadata.clone(),
            tensors: entries,
            adam_slots: self.adam.slots.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &all {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("corrupt checkpoint header: {e}")))?;
        let data = &bytes[20 + len..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != 4 * total {
            return Err(bad(format!(
                "checkpoint holds {} data bytes, header describes {}",
                data.len(),
                4 * total
            )));
        }
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let values: Vec<f32> = data[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| bad(err.to_string()))?;
            named.push((e.name.clone(), t));
        }
        let split = named.len() - 2 * header.adam_slots;
        let slot_tensors = named.split_off(split);
        let mut adam = header.adam;
        adam.slots = slot_tensors
            .chunks_exact(2)
            .map(|pair| AdamSlot {
                m: pair[0].1.clone(),
                v: pair[1].1.clone(),
            })
            .collect();
        Ok(Checkpoint {
            stage: header.stage,
            model: header.model,
            balancing: header.balancing,
            schedule: header.schedule,
            epoch: header.epoch,
            adam,
            learned_log_gamma: header.learned_log_gamma,
            tensors: named,
            metadata: header.metadata,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
