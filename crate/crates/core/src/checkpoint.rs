//! Versioned, self-describing checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, one byte
//! of element width, three reserved bytes, a length-prefixed JSON metadata
//! block (config echo, tensor directory, optimizer directory, step
//! counters), then the raw little-endian scalar payload. A file is only
//! loaded back at the precision it was written with.

use crate::error::{Error, Result};
use crate::model::{DannConfig, DannModel};
use crate::optim::Adam;
use crate::tensor::{Precision, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DANNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub global_step: u64,
    pub epochs_completed: u64,
    pub cycles_completed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: TensorKind,
    /// Offset into the payload, in scalar elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    entries: Vec<MomentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: DannConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerMeta>,
    counters: Counters,
    run_config: Option<serde_json::Value>,
}

/// Optimizer state keyed by parameter name, in checkpoint order.
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub moments: Vec<(String, Vec<T>, Vec<T>)>,
}

pub struct LoadedCheckpoint<T: Scalar> {
    pub model: DannModel<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub counters: Counters,
    pub run_config: Option<serde_json::Value>,
}

/// Writes model parameters, batch-norm buffers, optional optimizer moments,
/// counters, and a config echo. Identical state writes identical bytes.
pub fn save<T: Scalar>(
    path: &Path,
    model: &DannModel<T>,
    optimizer: Option<(&Adam<T>, &[(String, Tensor<T>)])>,
    counters: Counters,
    run_config: Option<serde_json::Value>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<T> = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, kind: TensorKind, payload: &mut Vec<T>| {
        let offset = payload.len();
        let data = t.to_vec();
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            kind,
            offset,
            len: data.len(),
        });
        payload.extend_from_slice(&data);
    };
    for (name, p) in model.parameters() {
        push(name, &p, TensorKind::Param, &mut payload);
    }
    for (name, b) in model.buffers() {
        push(name, &b, TensorKind::Buffer, &mut payload);
    }

    let optimizer_meta = optimizer.map(|(adam, params)| {
        let (step, state) = adam.export_state();
        let mut entries = Vec::new();
        for ((name, _), (m, v)) in params.iter().zip(state) {
            let m_offset = payload.len();
            payload.extend_from_slice(&m);
            let v_offset = payload.len();
            payload.extend_from_slice(&v);
            entries.push(MomentEntry {
                name: name.clone(),
                len: m.len(),
                m_offset,
                v_offset,
            });
        }
        OptimizerMeta { step, entries }
    });

    let meta = CheckpointMeta {
        model_config: model.cfg.clone(),
        tensors,
        optimizer: optimizer_meta,
        counters,
        run_config,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::PRECISION.byte_width() as u8, 0, 0, 0])?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    for v in payload {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    w.flush()?;
    Ok(())
}

/// Element precision of a checkpoint file, without loading the payload.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let mut r = BufReader::new(File::open(path)?);
    let (_, precision) = read_header(&mut r)?;
    Ok(precision)
}

fn read_header(r: &mut impl Read) -> Result<(u64, Precision)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut width = [0u8; 4];
    r.read_exact(&mut width)?;
    let precision = match width[0] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown element width {other}"
            )))
        }
    };
    let mut meta_len = [0u8; 8];
    r.read_exact(&mut meta_len)?;
    Ok((u64::from_le_bytes(meta_len), precision))
}

/// Rebuilds the model (and optimizer state, when present) from a file.
pub fn load<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let (meta_len, precision) = read_header(&mut r)?;
    if precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {precision:?} scalars; load it at that precision"
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let width = T::PRECISION.byte_width();
    if raw.len() % width != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let payload: Vec<T> = raw.chunks_exact(width).map(T::from_le_slice).collect();
    let slice_at = |offset: usize, len: usize| -> Result<&[T]> {
        payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint("tensor entry outside payload".into()))
    };

    let model = DannModel::<T>::new(meta.model_config.clone(), 0)?;
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = model
        .parameters()
        .into_iter()
        .chain(model.buffers())
        .collect();
    for entry in &meta.tensors {
        let tensor = by_name.remove(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint names unknown tensor {}", entry.name))
        })?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape of {} is {:?} in file, {:?} in model",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        tensor.set_data(slice_at(entry.offset, entry.len)?);
    }
    if !by_name.is_empty() {
        let mut missing: Vec<&String> = by_name.keys().collect();
        missing.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing tensors: {missing:?}"
        )));
    }

    let optimizer = match meta.optimizer {
        Some(om) => {
            let mut moments = Vec::new();
            for e in &om.entries {
                moments.push((
                    e.name.clone(),
                    slice_at(e.m_offset, e.len)?.to_vec(),
                    slice_at(e.v_offset, e.len)?.to_vec(),
                ));
            }
            Some(OptimizerState {
                step: om.step,
                moments,
            })
        }
        None => None,
    };

    Ok(LoadedCheckpoint {
        model,
        optimizer,
        counters: meta.counters,
        run_config: meta.run_config,
    })
}
