//! Co-attention encoder over the fused query and response streams, and the
//! capacity-bounded memory cell whose summary is appended to each stream.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attention::{feed_forward, multi_head, FeedForwardParams, LayerNormParams, MultiHeadParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, ParamId, Scalar, Tape, Tensor, Var};

/// Attention sub-layer and feed-forward sub-layer, each wrapped in a residual
/// connection followed by layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct AttentionUnitParams {
    pub attention: MultiHeadParams,
    pub ffn: FeedForwardParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl AttentionUnitParams {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: b.scope("attention", |s| MultiHeadParams::new(s, heads, d_model, d_model))?,
            ffn: b.scope("ffn", |s| FeedForwardParams::new(s, d_model, d_ff, dropout))?,
            norm1: b.scope("norm1", |s| LayerNormParams::new(s, d_model))?,
            norm2: b.scope("norm2", |s| LayerNormParams::new(s, d_model))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoAttentionBlockParams {
    pub self_query: AttentionUnitParams,
    pub self_response: AttentionUnitParams,
    pub guided_query: AttentionUnitParams,
    pub guided_response: AttentionUnitParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub blocks: Vec<CoAttentionBlockParams>,
    pub memory_projection: (ParamId, ParamId),
    pub eps: f64,
    /// Test hook: drop every attention and feed-forward branch, leaving only
    /// the layer-norm cascade.
    pub zero_branches: bool,
}

impl EncoderParams {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        blocks: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        eps: f64,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("encoder needs at least one co-attention block".into()));
        }
        let mut list = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let block = b.scope(&format!("block{i}"), |s| -> Result<_> {
                let mut unit = |name: &str| s.scope(name, |u| AttentionUnitParams::new(u, d_model, heads, d_ff, dropout));
                Ok(CoAttentionBlockParams {
                    self_query: unit("self_query")?,
                    self_response: unit("self_response")?,
                    guided_query: unit("guided_query")?,
                    guided_response: unit("guided_response")?,
                })
            })?;
            list.push(block);
        }
        let memory_projection =
            b.scope("memory_projection", |s| -> Result<_> { Ok((s.weight("weight", d_model, d_model)?, s.normal("bias", 1, d_model, 0.02)?)) })?;
        Ok(Self { blocks: list, memory_projection, eps, zero_branches: false })
    }
}

fn attention_unit<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    guide: Var,
    p: &AttentionUnitParams,
    enc: &EncoderParams,
    label: &str,
) -> Result<Var> {
    let eps = T::cast(enc.eps);
    let h = if enc.zero_branches {
        x
    } else {
        let attended = multi_head(tape, x, guide, guide, &p.attention, label)?;
        tape.add(x, attended)?
    };
    let h = p.norm1.apply(tape, h, eps)?;
    let out = if enc.zero_branches {
        h
    } else {
        let ff = feed_forward(tape, h, &p.ffn)?;
        tape.add(h, ff)?
    };
    p.norm2.apply(tape, out, eps)
}

/// Self-attention unit: Q = K = V = X.
pub fn self_attention_unit<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &AttentionUnitParams,
    enc: &EncoderParams,
    label: &str,
) -> Result<Var> {
    attention_unit(tape, x, x, p, enc, label)
}

/// Guided-attention unit: X queries, Y supplies keys and values.
pub fn guided_attention_unit<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    y: Var,
    p: &AttentionUnitParams,
    enc: &EncoderParams,
    label: &str,
) -> Result<Var> {
    if tape.dims(x).1 != tape.dims(y).1 {
        return Err(Error::shape("guided_attention", format!("{:?} guided by {:?}", tape.dims(x), tape.dims(y))));
    }
    attention_unit(tape, x, y, p, enc, label)
}

/// Runs the N co-attention blocks. Within a block both streams first pass
/// their self-attention unit; each then takes the other's self-attended
/// value as its guide, so the two updates are independent of each other.
pub fn co_attention_stack<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q_o: Var,
    r_o: Var,
    p: &EncoderParams,
) -> Result<(Var, Var)> {
    co_attention_stack_labeled(tape, q_o, r_o, p, "encoder")
}

/// [`co_attention_stack`] with a caller-chosen prefix for recorded attention.
pub fn co_attention_stack_labeled<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q_o: Var,
    r_o: Var,
    p: &EncoderParams,
    label: &str,
) -> Result<(Var, Var)> {
    let (mut zq, mut zr) = (q_o, r_o);
    for (i, block) in p.blocks.iter().enumerate() {
        let sq = self_attention_unit(tape, zq, &block.self_query, p, &format!("{label}.block{i}.self_query"))?;
        let sr = self_attention_unit(tape, zr, &block.self_response, p, &format!("{label}.block{i}.self_response"))?;
        zq = guided_attention_unit(tape, sq, sr, &block.guided_query, p, &format!("{label}.block{i}.guided_query"))?;
        zr = guided_attention_unit(tape, sr, sq, &block.guided_response, p, &format!("{label}.block{i}.guided_response"))?;
    }
    Ok((zq, zr))
}

/// Ordered store of past summaries, oldest first, evicting FIFO at capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCell<T> {
    capacity: usize,
    width: usize,
    entries: VecDeque<Vec<T>>,
    step: u64,
}

/// Plain-data form of a [`MemoryCell`] for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub capacity: usize,
    pub width: usize,
    pub entries: Vec<Vec<f64>>,
    pub step: u64,
}

impl<T: Scalar> MemoryCell<T> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config(format!("memory cell needs positive capacity and width, got {capacity}/{width}")));
        }
        Ok(Self { capacity, width, entries: VecDeque::with_capacity(capacity), step: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of writes since creation or the last reset.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entries(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Stored entries stacked in write order; `None` for an empty cell.
    pub fn read(&self) -> Option<Tensor<T>> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flat_map(|e| e.iter().copied()).collect();
        Some(Tensor::matrix(self.entries.len(), self.width, data).expect("entries share the cell width"))
    }

    /// Appends a detached copy of `summary`, evicting the oldest entry when full.
    pub fn write(&mut self, summary: &[T]) -> Result<()> {
        if summary.len() != self.width {
            return Err(Error::shape("memory_write", format!("summary width {} for cell width {}", summary.len(), self.width)));
        }
        if summary.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite memory summary".into()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(summary.to_vec());
        self.step += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.entries.clear();
        self.step = 0;
    }

    /// Mean of the stored rows, or zeros when empty.
    pub fn summary(&self) -> Vec<T> {
        let mut mean = vec![T::zero(); self.width];
        if self.entries.is_empty() {
            return mean;
        }
        for e in &self.entries {
            for (m, &v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        let inv = T::one() / T::cast(self.entries.len() as f64);
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            capacity: self.capacity,
            width: self.width,
            entries: self.entries.iter().map(|e| e.iter().map(|v| v.to_f64_lossless()).collect()).collect(),
            step: self.step,
        }
    }

    pub fn from_snapshot(s: &MemorySnapshot) -> Result<Self> {
        let mut cell = Self::new(s.capacity, s.width)?;
        if s.entries.len() > s.capacity {
            return Err(Error::Config(format!("memory snapshot holds {} entries over capacity {}", s.entries.len(), s.capacity)));
        }
        for e in &s.entries {
            let row: Vec<T> = e.iter().map(|&v| T::cast(v)).collect();
            cell.write(&row)?;
        }
        cell.step = s.step;
        Ok(cell)
    }
}

/// Appends `projection(mean of memory)` as one extra row of `z`. An empty
/// cell contributes `projection(0)`. Memory contents enter as constants.
pub fn inject_memory<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, cell: &MemoryCell<T>, p: &EncoderParams) -> Result<Var> {
    let d = tape.dims(z).1;
    if cell.width() != d {
        return Err(Error::shape("inject_memory", format!("memory width {} for stream width {d}", cell.width())));
    }
    let summary = tape.input_matrix(1, d, cell.summary())?;
    let row = tape.linear(summary, p.memory_projection.0, Some(p.memory_projection.1))?;
    tape.concat_rows(&[z, row])
}
