use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, ParamId, Scalar, Tape, Var};

use super::{SceneExample, SubtaskInputs, Vocabulary, PAD};

/// Learned token table and the object-feature projection.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub table: ParamId,
    pub object_projection: (ParamId, ParamId),
    pub d_obj: usize,
}

impl EmbeddingParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, vocab_size: usize, d_obj: usize, d_model: usize, token_std: f64, object_std: f64) -> Result<Self> {
        Ok(Self {
            table: b.normal("tokens", vocab_size, d_model, token_std)?,
            object_projection: b.scope("objects", |s| -> Result<_> {
                let w = if object_std > 0.0 { s.normal("weight", d_obj, d_model, object_std)? } else { s.weight("weight", d_obj, d_model)? };
                Ok((w, s.constant("bias", d_model, 0.0)?))
            })?,
            d_obj,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddedExample {
    pub query: Var,
    pub responses: Vec<Var>,
    pub objects: Var,
}

/// Word tokens take their table row; a tag token takes the projected
/// features of the object it references, the same row that object has in
/// the object matrix.
pub fn embed_example<T: Scalar>(
    tape: &mut Tape<'_, T>,
    example: &SceneExample,
    inputs: &SubtaskInputs,
    vocab: &Vocabulary,
    p: &EmbeddingParams,
) -> Result<EmbeddedExample> {
    let n_obj = example.objects.len();
    if n_obj == 0 {
        return Err(Error::Data { id: example.id.clone(), detail: "no objects".into() });
    }
    let mut feats = Vec::with_capacity(n_obj * p.d_obj);
    for o in &example.objects {
        if o.features.len() != p.d_obj {
            return Err(Error::Data {
                id: example.id.clone(),
                detail: format!("{} object features, model expects {}", o.features.len(), p.d_obj),
            });
        }
        feats.extend(o.features.iter().map(|&v| T::cast(v)));
    }
    let raw = tape.input_matrix(n_obj, p.d_obj, feats)?;
    let objects = tape.linear(raw, p.object_projection.0, Some(p.object_projection.1))?;
    let table = tape.param(p.table);
    let vocab_rows = tape.dims(table).0;

    let embed_seq = |tape: &mut Tape<'_, T>, seq: &[usize]| -> Result<Var> {
        let rows = seq
            .iter()
            .map(|&t| {
                if let Some(tag) = vocab.tag_of(t) {
                    let obj = example.object_with_tag(tag).ok_or_else(|| Error::Data {
                        id: example.id.clone(),
                        detail: format!("tag token {} references no object", vocab.token(t).unwrap_or("?")),
                    })?;
                    Ok((objects, obj))
                } else if t == PAD || t >= vocab.len() || t >= vocab_rows {
                    Err(Error::Data { id: example.id.clone(), detail: format!("unknown token id {t}") })
                } else {
                    Ok((table, t))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Data { id: example.id.clone(), detail: "empty token sequence".into() });
        }
        tape.gather_rows(&rows)
    };
    let query = embed_seq(tape, &inputs.query)?;
    let responses = inputs.responses.iter().map(|r| embed_seq(tape, r)).collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedExample { query, responses, objects })
}
