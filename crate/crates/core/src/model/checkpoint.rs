//! Checkpoints: `checkpoint.json` (metadata and tensor index) next to
//! `params.bin` (raw little-endian `f32` blobs in index order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::autodiff::{SgdConfig, SgdState, Tensor};
use crate::error::{Error, Result};
use crate::scenegen::io::{f32_from_le, f32_le_bytes};

pub const CHECKPOINT_VERSION: &str = "1";
const INDEX: &str = "checkpoint.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Momentum,
    BnMean,
    BnVar,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format_version: String,
    dtype: String,
    data_file: String,
    model: ModelConfig,
    optimizer: Option<SgdSettings>,
    epoch: Option<usize>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SgdSettings {
    momentum: f32,
    weight_decay: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<SgdState>,
    pub epoch: Option<usize>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelState,
    optimizer: Option<&SgdState>,
    epoch: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: &str, kind, t: &Tensor| {
        tensors.push(Entry {
            name: name.into(),
            kind,
            shape: t.shape().to_vec(),
            byte_offset: blob.len() as u64,
        });
        blob.extend(f32_le_bytes(t.data()));
    };
    for (name, p) in model.names.iter().zip(&model.params) {
        push(name, Kind::Param, p);
    }
    if let Some(opt) = optimizer {
        for (name, v) in model.names.iter().zip(&opt.velocity) {
            push(name, Kind::Momentum, v);
        }
    }
    for (name, stats) in &model.bn {
        push(name, Kind::BnMean, &stats.mean);
        push(name, Kind::BnVar, &stats.var);
    }
    let index = Index {
        format_version: CHECKPOINT_VERSION.into(),
        dtype: "f32le".into(),
        data_file: BLOB.into(),
        model: model.config.clone(),
        optimizer: optimizer.map(|o| SgdSettings {
            momentum: o.config.momentum,
            weight_decay: o.config.weight_decay,
        }),
        epoch,
        tensors,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let index_path = dir.join(INDEX);
    fs::write(&index_path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&index_path, e))
}

fn read_tensor(blob: &[u8], entry: &Entry, expected: &[usize]) -> Result<Tensor> {
    if entry.shape != expected {
        return Err(Error::format(
            entry.name.clone(),
            format!("shape {:?} does not match model shape {expected:?}", entry.shape),
        ));
    }
    let len: usize = expected.iter().product::<usize>() * 4;
    let off = entry.byte_offset as usize;
    if off.checked_add(len).is_none_or(|end| end > blob.len()) {
        return Err(Error::format(
            entry.name.clone(),
            format!("bytes {off}..{} outside data file of {} bytes", off + len, blob.len()),
        ));
    }
    Tensor::new(expected.to_vec(), f32_from_le(&blob[off..off + len]))
}

/// Loads a checkpoint, validating every tensor against the layout implied by
/// the stored model configuration.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join(INDEX);
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_VERSION) => {}
        other => {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {other:?}, expected {CHECKPOINT_VERSION:?}"),
            ))
        }
    }
    let index: Index = serde_json::from_value(raw).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if index.dtype != "f32le" {
        return Err(Error::format("dtype", format!("unsupported dtype {:?}", index.dtype)));
    }
    let blob_path = dir.join(&index.data_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut model = ModelState::new(index.model.clone())?;
    let find = |name: &str, kind: Kind| {
        index
            .tensors
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| Error::format(name.to_string(), format!("missing {kind:?} tensor")))
    };
    for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
        *p = read_tensor(&blob, find(name, Kind::Param)?, p.shape())?;
    }
    for (name, stats) in model.bn.iter_mut() {
        stats.mean = read_tensor(&blob, find(name, Kind::BnMean)?, stats.mean.shape())?;
        stats.var = read_tensor(&blob, find(name, Kind::BnVar)?, stats.var.shape())?;
    }
    let optimizer = match index.optimizer {
        None => None,
        Some(s) => {
            let mut opt = model.new_optimizer(SgdConfig {
                momentum: s.momentum,
                weight_decay: s.weight_decay,
            });
            for (name, v) in model.names.iter().zip(opt.velocity.iter_mut()) {
                *v = read_tensor(&blob, find(name, Kind::Momentum)?, v.shape())?;
            }
            Some(opt)
        }
    };
    let known = |e: &Entry| match e.kind {
        Kind::Param | Kind::Momentum => model.index_of(&e.name).is_some(),
        Kind::BnMean | Kind::BnVar => model.bn.iter().any(|(n, _)| *n == e.name),
    };
    if let Some(e) = index.tensors.iter().find(|e| !known(e)) {
        return Err(Error::format(e.name.clone(), "tensor not part of the model"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: index.epoch,
    })
}

impl ModelState {
    /// Copies parameters and statistics from `other`, requiring an identical
    /// layout. The error names the first mismatching parameter.
    pub fn load_weights(&mut self, other: &ModelState) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .index_of(name)
                .ok_or_else(|| Error::format(name.clone(), "missing from source model"))?;
            if other.params[j].shape() != self.params[i].shape() {
                return Err(Error::format(
                    name.clone(),
                    format!(
                        "shape {:?} does not match model shape {:?}",
                        other.params[j].shape(),
                        self.params[i].shape()
                    ),
                ));
            }
        }
        if self.names.len() != other.names.len() {
            return Err(Error::format("parameters", "source model has extra parameters"));
        }
        for (i, name) in self.names.clone().iter().enumerate() {
            self.params[i] = other.param(name).expect("checked").clone();
        }
        for (name, stats) in self.bn.iter_mut() {
            let (_, src) = other
                .bn
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format(name.clone(), "missing batch-norm statistics"))?;
            if src.mean.shape() != stats.mean.shape() {
                return Err(Error::format(name.clone(), "batch-norm width mismatch"));
            }
            *stats = src.clone();
        }
        Ok(())
    }
}
