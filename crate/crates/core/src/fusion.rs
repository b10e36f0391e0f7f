//! Multimodal fusion layer: a textual branch, a text-conditioned visual
//! branch, and a text-object unit in which tokens attend to fused objects.

use crate::attention::{add_position, multi_head, LayerNormParams, MultiHeadParams, PositionalEncodingTable};
use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, ParamId, ParamSet, RngState, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct FusionParams<T> {
    pub textual: MultiHeadParams,
    /// Attends over `[Q_ve | X3]`, so its input width is `2·d_model`.
    pub visual: MultiHeadParams,
    pub text_object: MultiHeadParams,
    pub object_norm: LayerNormParams,
    pub positions: PositionalEncodingTable<T>,
    /// Test hook: when false, object features get no positional encoding.
    pub use_positions: bool,
    pub eps: T,
}

impl<T: Scalar> FusionParams<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, d_model: usize, heads: usize, max_objects: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            textual: b.scope("textual", |s| MultiHeadParams::new(s, heads, d_model, d_model))?,
            visual: b.scope("visual", |s| MultiHeadParams::new(s, heads, 2 * d_model, d_model))?,
            text_object: b.scope("text_object", |s| MultiHeadParams::new(s, heads, d_model, d_model))?,
            object_norm: b.scope("object_norm", |s| LayerNormParams::new(s, d_model))?,
            positions: PositionalEncodingTable::new(max_objects, d_model)?,
            use_positions: true,
            eps: T::cast(eps),
        })
    }

    pub fn d_model(&self) -> usize {
        self.textual.d_model
    }

    /// Re-initializes the three attention layers around identity maps plus
    /// N(0, noise²/fan_in) perturbations.
    ///
    /// None of the fusion units has a residual path, so with generic random
    /// weights every unit averages its rows together and token identity is
    /// mostly gone by the time the encoder sees it. Identity query/key maps
    /// make each row attend mainly to its own match; identity value/output
    /// maps carry the attended rows through unchanged. In the visual unit the
    /// query/key maps read the object half of `[Q_ve | X3]` and the value map
    /// sums both halves.
    pub fn init_near_identity(&self, params: &mut ParamSet<T>, rng: &mut RngState, noise: f64) {
        let d = self.d_model();
        for layer in [&self.textual, &self.visual, &self.text_object] {
            let in_dim = layer.in_dim;
            let qk = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
            let v = |i: usize, j: usize| if i % d == j { 1.0 } else { 0.0 };
            set_near(params, layer.q.0, in_dim, d, qk, rng, noise);
            set_near(params, layer.k.0, in_dim, d, qk, rng, noise);
            set_near(params, layer.v.0, in_dim, d, v, rng, noise);
            set_near(params, layer.out.0, d, d, qk, rng, noise);
        }
    }
}

fn set_near<T: Scalar>(
    params: &mut ParamSet<T>,
    id: ParamId,
    rows: usize,
    cols: usize,
    base: impl Fn(usize, usize) -> f64,
    rng: &mut RngState,
    noise: f64,
) {
    let std = noise / (rows as f64).sqrt();
    let w = params.get_mut(id).data_mut();
    for i in 0..rows {
        for j in 0..cols {
            w[i * cols + j] = T::cast(base(i, j) + std * rng.normal());
        }
    }
}

/// Named intermediate values of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionIntermediates {
    /// Token features after intra-sentence attention.
    pub x1: Var,
    /// Object-to-token attention weights, `n_obj × n_tok`.
    pub x2: Var,
    /// Token features attended per object, `n_obj × d_model`.
    pub x3: Var,
    /// Normalized, position-encoded objects.
    pub q_ve: Var,
    /// Output of the visual branch.
    pub fused_visual: Var,
}

/// Fused query and the four fused responses of one example.
#[derive(Clone, Debug)]
pub struct FusionOutputs {
    pub q_o: Var,
    pub r_o: Vec<Var>,
}

pub fn textual_branch<T: Scalar>(tape: &mut Tape<'_, T>, tokens: Var, p: &FusionParams<T>, label: &str) -> Result<Var> {
    if tape.dims(tokens).0 == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    multi_head(tape, tokens, tokens, tokens, &p.textual, &format!("{label}.textual"))
}

/// Returns the fused object features together with the branch intermediates.
pub fn visual_branch<T: Scalar>(
    tape: &mut Tape<'_, T>,
    objects: Var,
    x1: Var,
    p: &FusionParams<T>,
    label: &str,
) -> Result<(Var, FusionIntermediates)> {
    let (n_obj, d) = tape.dims(objects);
    if n_obj == 0 {
        return Err(Error::Input("no objects".into()));
    }
    let q_ve = if p.use_positions {
        add_position(tape, objects, &p.positions, &p.object_norm, p.eps)?
    } else {
        p.object_norm.apply(tape, objects, p.eps)?
    };
    let logits = tape.matmul_bt(q_ve, x1)?;
    let logits = tape.scale(logits, T::cast(1.0 / (d as f64).sqrt()));
    let x2 = tape.softmax_rows(logits);
    if tape.is_probing() {
        tape.probe(format!("{label}.object_to_text"), x2);
    }
    let x3 = tape.matmul(x2, x1)?;
    let joint = tape.concat_cols(&[q_ve, x3])?;
    let fused_visual = multi_head(tape, joint, joint, joint, &p.visual, &format!("{label}.visual"))?;
    Ok((fused_visual, FusionIntermediates { x1, x2, x3, q_ve, fused_visual }))
}

/// Tokens query the fused objects; the output is aligned to tokens.
pub fn text_object_fusion<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x1: Var,
    fused_visual: Var,
    p: &FusionParams<T>,
    label: &str,
) -> Result<Var> {
    multi_head(tape, x1, fused_visual, fused_visual, &p.text_object, &format!("{label}.text_object"))
}

/// All three units for one token stream.
pub fn fuse_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    objects: Var,
    p: &FusionParams<T>,
    label: &str,
) -> Result<(Var, FusionIntermediates)> {
    let x1 = textual_branch(tape, tokens, p, label)?;
    let (fused_visual, inter) = visual_branch(tape, objects, x1, p, label)?;
    let out = text_object_fusion(tape, x1, fused_visual, p, label)?;
    Ok((out, inter))
}

/// Fuses the query once and each response candidate separately, all with
/// the same parameters.
pub fn fuse_example<T: Scalar>(
    tape: &mut Tape<'_, T>,
    query: Var,
    responses: &[Var],
    objects: Var,
    p: &FusionParams<T>,
) -> Result<FusionOutputs> {
    let (q_o, _) = fuse_sequence(tape, query, objects, p, "fusion.query")?;
    let r_o = responses
        .iter()
        .enumerate()
        .map(|(i, &r)| fuse_sequence(tape, r, objects, p, &format!("fusion.response{i}")).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionOutputs { q_o, r_o })
}
