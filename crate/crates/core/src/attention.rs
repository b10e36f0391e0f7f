//! Attention primitives shared by the fusion layer, the encoder and the head.

use crate::error::{Error, Result};
use crate::numerics::{validate_dropout_rate, ParamBuilder, ParamId, Scalar, Tape, Tensor, Var};

/// Gain and bias of a row-wise layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, width: usize) -> Result<Self> {
        Ok(Self { gamma: b.constant("gamma", width, 1.0)?, beta: b.constant("beta", width, 0.0)? })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, eps: T) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Weights of one multi-head attention layer.
///
/// Input projections map `in_dim → d_model`; the output projection is
/// `d_model → d_model`. Each head sees a `d_model / heads` slice.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub d_model: usize,
    pub in_dim: usize,
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
}

impl MultiHeadParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, heads: usize, in_dim: usize, d_model: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible into {heads} heads")));
        }
        let mut proj = |name: &str, fan_in: usize| -> Result<(ParamId, ParamId)> {
            b.scope(name, |s| Ok((s.weight("weight", fan_in, d_model)?, s.constant("bias", d_model, 0.0)?)))
        };
        Ok(Self {
            heads,
            d_model,
            in_dim,
            q: proj("q", in_dim)?,
            k: proj("k", in_dim)?,
            v: proj("v", in_dim)?,
            out: proj("out", d_model)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// softmax(Q·Kᵀ/√d)·V. Returns the output and the attention weights.
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (_, d) = tape.dims(q);
    let (n, dk) = tape.dims(k);
    let (nv, _) = tape.dims(v);
    if d == 0 || n == 0 {
        return Err(Error::shape("scaled_dot_attention", "empty feature or key axis"));
    }
    if d != dk || n != nv {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q {:?}, K {:?}, V {:?}", tape.dims(q), tape.dims(k), tape.dims(v)),
        ));
    }
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, T::cast(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax_rows(logits);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projects, splits into heads, attends per head, concatenates in head order
/// and applies the output projection.
pub fn multi_head<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &MultiHeadParams,
    label: &str,
) -> Result<Var> {
    for x in [q_in, k_in, v_in] {
        if tape.dims(x).1 != p.in_dim {
            return Err(Error::shape(
                "multi_head",
                format!("input width {} but layer expects {}", tape.dims(x).1, p.in_dim),
            ));
        }
    }
    let q = tape.linear(q_in, p.q.0, Some(p.q.1))?;
    let k = tape.linear(k_in, p.k.0, Some(p.k.1))?;
    let v = tape.linear(v_in, p.v.0, Some(p.v.1))?;
    let dk = p.head_dim();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dk, dk)?, tape.slice_cols(k, h * dk, dk)?, tape.slice_cols(v, h * dk, dk)?)
        };
        let (out, weights) = scaled_dot_attention(tape, qh, kh, vh)?;
        if tape.is_probing() {
            tape.probe(format!("{label}.head{h}"), weights);
        }
        heads.push(out);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.linear(joined, p.out.0, Some(p.out.1))
}

/// Sinusoidal position table: sin at even columns, cos at odd columns, with
/// angle pos / 10000^(2i/d_model).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncodingTable<T> {
    pub max_positions: usize,
    pub d_model: usize,
    pub table: Tensor<T>,
}

impl<T: Scalar> PositionalEncodingTable<T> {
    pub fn new(max_positions: usize, d_model: usize) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
        }
        if max_positions == 0 {
            return Err(Error::Config("positional encoding needs at least one position".into()));
        }
        let mut data = vec![T::zero(); max_positions * d_model];
        for pos in 0..max_positions {
            for i in 0..d_model / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
                data[pos * d_model + 2 * i] = T::cast(angle.sin());
                data[pos * d_model + 2 * i + 1] = T::cast(angle.cos());
            }
        }
        Ok(Self { max_positions, d_model, table: Tensor::matrix(max_positions, d_model, data)? })
    }

    pub fn rows(&self, n: usize) -> Result<Tensor<T>> {
        if n > self.max_positions {
            return Err(Error::shape(
                "positional_encoding",
                format!("{n} positions requested, table holds {}", self.max_positions),
            ));
        }
        Tensor::matrix(n, self.d_model, self.table.data()[..n * self.d_model].to_vec())
    }
}

/// layer_norm(X) + PE[0..n].
pub fn add_position<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    table: &PositionalEncodingTable<T>,
    norm: &LayerNormParams,
    eps: T,
) -> Result<Var> {
    let (n, d) = tape.dims(x);
    if d != table.d_model {
        return Err(Error::shape("add_position", format!("width {d}, table width {}", table.d_model)));
    }
    let pe = table.rows(n)?;
    let normed = norm.apply(tape, x, eps)?;
    let pe = tape.input(&pe);
    tape.add(normed, pe)
}

/// Two affine layers with ReLU and dropout between them.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub first: (ParamId, ParamId),
    pub second: (ParamId, ParamId),
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl FeedForwardParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_model: usize, d_ff: usize, dropout: f64) -> Result<Self> {
        if d_ff < d_model {
            return Err(Error::Config(format!("d_ff {d_ff} must be at least d_model {d_model}")));
        }
        validate_dropout_rate(dropout)?;
        let first = b.scope("fc1", |s| Ok::<_, Error>((s.weight("weight", d_model, d_ff)?, s.constant("bias", d_ff, 0.0)?)))?;
        let second = b.scope("fc2", |s| Ok::<_, Error>((s.weight("weight", d_ff, d_model)?, s.constant("bias", d_model, 0.0)?)))?;
        Ok(Self { first, second, d_model, d_ff, dropout })
    }
}

pub fn feed_forward<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = tape.linear(x, p.first.0, Some(p.first.1))?;
    let h = tape.relu(h);
    let h = tape.dropout(h, p.dropout)?;
    tape.linear(h, p.second.0, Some(p.second.1))
}
