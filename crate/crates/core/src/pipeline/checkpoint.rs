//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! UTF-8 JSON header, then every parameter in header order as `f64` LE,
//! followed (when present) by Adam first moments and then second moments in
//! the same order. Trailing bytes are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{MemoryCell, MemorySnapshot};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{RngSnapshot, RngState, Scalar};

use super::model::{MemoryPair, Model};
use super::optim::Adam;
use super::{ModelConfig, Precision, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: Precision,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    params: Vec<ParamEntry>,
    memory_query: MemorySnapshot,
    memory_response: MemorySnapshot,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngSnapshot>,
    step: u64,
    epoch: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    warmup_steps: u64,
    step: u64,
}

/// Everything needed to resume training or evaluate.
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<Adam<T>>,
    pub rng: Option<RngSnapshot>,
    pub step: u64,
    pub epoch: u64,
}

/// Borrowed view written by [`save_checkpoint`].
pub struct CheckpointView<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub train_config: Option<&'a TrainConfig>,
    pub optimizer: Option<&'a Adam<T>>,
    pub rng: Option<RngSnapshot>,
    pub step: u64,
    pub epoch: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn view(&self) -> CheckpointView<'_, T> {
        CheckpointView {
            model: &self.model,
            train_config: self.train_config.as_ref(),
            optimizer: self.optimizer.as_ref(),
            rng: self.rng,
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Model-only checkpoint.
    pub fn from_model(model: Model<T>) -> Self {
        Self { model, train_config: None, optimizer: None, rng: None, step: 0, epoch: 0 }
    }
}

impl<'a, T: Scalar> CheckpointView<'a, T> {
    pub fn training(
        model: &'a Model<T>,
        train_config: &'a TrainConfig,
        optimizer: &'a Adam<T>,
        rng: &RngState,
        step: u64,
        epoch: u64,
    ) -> Self {
        Self { model, train_config: Some(train_config), optimizer: Some(optimizer), rng: Some(rng.snapshot()), step, epoch }
    }
}

fn precision_of<T: Scalar>() -> Precision {
    if T::NAME == "f32" {
        Precision::Single
    } else {
        Precision::Double
    }
}

pub fn encode_checkpoint<T: Scalar>(ck: &CheckpointView<'_, T>) -> Vec<u8> {
    let model = ck.model;
    let header = Header {
        precision: precision_of::<T>(),
        model_config: model.config.clone(),
        train_config: ck.train_config.cloned(),
        params: model.params.iter().map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
        memory_query: model.memory.query.snapshot(),
        memory_response: model.memory.response.snapshot(),
        optimizer: ck.optimizer.map(|o| OptimizerHeader {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            warmup_steps: o.warmup_steps,
            step: o.step,
        }),
        rng: ck.rng,
        step: ck.step,
        epoch: ck.epoch,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.scalar_count() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[T]| {
        for v in vals {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    };
    for (_, _, t) in model.params.iter() {
        put(t.data());
    }
    if let Some(o) = ck.optimizer {
        for m in o.first_moment.iter().chain(&o.second_moment) {
            put(m);
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated: needed {n} bytes for {what}, {} available",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn error(&self, detail: String) -> Error {
        Error::Parse { location: format!("byte offset {}", self.pos), detail }
    }

    fn f64s<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| T::cast(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))).collect())
    }
}

fn read_header(bytes: &[u8]) -> Result<(Header, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse { location: "byte offset 0".into(), detail: "not a checkpoint file (bad magic)".into() });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| r.error(format!("header length {len} is too large")))?;
    let start = r.pos;
    let json = r.take(len, "header")?;
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| Error::Parse { location: format!("byte offset {start}"), detail: format!("checkpoint header: {e}") })?;
    Ok((header, r))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, mut r) = read_header(bytes)?;
    if header.precision != precision_of::<T>() {
        return Err(Error::Input(format!(
            "checkpoint holds {:?} precision parameters but {} was requested",
            header.precision,
            T::NAME
        )));
    }
    let mut model = Model::<T>::new(header.model_config.clone(), 0)?;
    if header.params.len() != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter tensors, the configured model has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let mut order = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let id = model
            .params
            .lookup(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter {} is not part of the model", entry.name)))?;
        let t = model.params.get(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::shape("checkpoint", format!("{}: stored {:?}, model {:?}", entry.name, entry.shape, t.shape())));
        }
        order.push(id);
    }
    for (&id, entry) in order.iter().zip(&header.params) {
        let n = model.params.get(id).numel();
        let vals = r.f64s::<T>(n, &entry.name)?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("checkpoint parameter {} has non-finite values", entry.name)));
        }
        model.params.get_mut(id).data_mut().copy_from_slice(&vals);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut moments = Vec::with_capacity(2);
            for kind in ["first moment", "second moment"] {
                let mut per_param = vec![Vec::new(); order.len()];
                for (&id, entry) in order.iter().zip(&header.params) {
                    per_param[id.index()] = r.f64s::<T>(model.params.get(id).numel(), &format!("{kind} of {}", entry.name))?;
                }
                moments.push(per_param);
            }
            let second_moment = moments.pop().expect("two moments");
            let first_moment = moments.pop().expect("two moments");
            Some(Adam {
                learning_rate: oh.learning_rate,
                beta1: oh.beta1,
                beta2: oh.beta2,
                epsilon: oh.epsilon,
                warmup_steps: oh.warmup_steps,
                step: oh.step,
                first_moment,
                second_moment,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    let d = model.config.d_model;
    for snap in [&header.memory_query, &header.memory_response] {
        if snap.width != d || snap.capacity != model.config.memory_capacity {
            return Err(Error::Config(format!(
                "memory snapshot {}x{} does not match model (capacity {}, width {d})",
                snap.capacity, snap.width, model.config.memory_capacity
            )));
        }
    }
    model.memory = MemoryPair {
        query: MemoryCell::from_snapshot(&header.memory_query)?,
        response: MemoryCell::from_snapshot(&header.memory_response)?,
    };
    Ok(Checkpoint { model, train_config: header.train_config, optimizer, rng: header.rng, step: header.step, epoch: header.epoch })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &CheckpointView<'_, T>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Scalar precision recorded in a checkpoint, read from the header only.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(&bytes)?.0.precision)
}
