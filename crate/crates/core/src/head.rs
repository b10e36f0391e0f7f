//! Prediction layer: attention reduction, stream fusion, candidate scoring.

use crate::attention::LayerNormParams;
use crate::error::{Error, Result};
use crate::numerics::{validate_dropout_rate, ParamBuilder, ParamId, Scalar, Tape, Var};

/// Number of response candidates scored per example.
pub const CANDIDATES: usize = 4;

/// Per-position scorer `d_model → d_mid → 1` with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ReductionParams {
    pub hidden: (ParamId, ParamId),
    pub score: (ParamId, ParamId),
}

impl ReductionParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_model: usize, d_mid: usize) -> Result<Self> {
        Ok(Self {
            hidden: b.scope("hidden", |s| -> Result<_> { Ok((s.weight("weight", d_model, d_mid)?, s.constant("bias", d_mid, 0.0)?)) })?,
            score: b.scope("score", |s| -> Result<_> { Ok((s.weight("weight", d_mid, 1)?, s.constant("bias", 1, 0.0)?)) })?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub reduce_query: ReductionParams,
    pub reduce_response: ReductionParams,
    pub project_query: ParamId,
    pub project_response: ParamId,
    pub norm: LayerNormParams,
    pub classifier_hidden: (ParamId, ParamId),
    pub classifier_out: (ParamId, ParamId),
    pub dropout: f64,
    pub eps: f64,
}

impl HeadParams {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d_model: usize,
        d_mid: usize,
        hidden: usize,
        dropout: f64,
        eps: f64,
    ) -> Result<Self> {
        validate_dropout_rate(dropout)?;
        Ok(Self {
            reduce_query: b.scope("reduce_query", |s| ReductionParams::new(s, d_model, d_mid))?,
            reduce_response: b.scope("reduce_response", |s| ReductionParams::new(s, d_model, d_mid))?,
            project_query: b.weight("project_query", d_model, d_model)?,
            project_response: b.weight("project_response", d_model, d_model)?,
            norm: b.scope("norm", |s| LayerNormParams::new(s, d_model))?,
            classifier_hidden: b.scope("classifier.fc1", |s| -> Result<_> { Ok((s.weight("weight", d_model, hidden)?, s.constant("bias", hidden, 0.0)?)) })?,
            classifier_out: b.scope("classifier.fc2", |s| -> Result<_> { Ok((s.weight("weight", hidden, 1)?, s.constant("bias", 1, 0.0)?)) })?,
            dropout,
            eps,
        })
    }
}

/// Collapses `z` (`n × d`) to a `1 × d` softmax-weighted sum of its rows.
/// Returns the summary and the `1 × n` weights.
pub fn attention_reduce<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, p: &ReductionParams, label: &str) -> Result<(Var, Var)> {
    if tape.dims(z).0 == 0 {
        return Err(Error::Input("cannot reduce an empty sequence".into()));
    }
    let h = tape.linear(z, p.hidden.0, Some(p.hidden.1))?;
    let h = tape.relu(h);
    let scores = tape.linear(h, p.score.0, Some(p.score.1))?;
    let scores = tape.transpose(scores);
    let alpha = tape.softmax_rows(scores);
    if tape.is_probing() {
        tape.probe(format!("{label}.reduce"), alpha);
    }
    let summary = tape.matmul(alpha, z)?;
    Ok((summary, alpha))
}

/// c = LayerNorm(z̃_q·W_q + z̃_r·W_r)
pub fn fuse_streams<T: Scalar>(tape: &mut Tape<'_, T>, zq: Var, zr: Var, p: &HeadParams) -> Result<Var> {
    let a = tape.linear(zq, p.project_query, None)?;
    let b = tape.linear(zr, p.project_response, None)?;
    let sum = tape.add(a, b)?;
    p.norm.apply(tape, sum, T::cast(p.eps))
}

/// One logit per candidate from the shared classifier; returns a `1 × 4` row.
pub fn score_candidates<T: Scalar>(tape: &mut Tape<'_, T>, fused: &[Var], p: &HeadParams) -> Result<Var> {
    if fused.len() != CANDIDATES {
        return Err(Error::Input(format!("expected {CANDIDATES} candidates, got {}", fused.len())));
    }
    let mut logits = Vec::with_capacity(CANDIDATES);
    for &c in fused {
        let h = tape.dropout(c, p.dropout)?;
        let h = tape.linear(h, p.classifier_hidden.0, Some(p.classifier_hidden.1))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, p.dropout)?;
        logits.push(tape.linear(h, p.classifier_out.0, Some(p.classifier_out.1))?);
    }
    tape.concat_cols(&logits)
}
