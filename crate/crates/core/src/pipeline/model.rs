//! End-to-end model: embedding → fusion → co-attention encoder (+ memory)
//! → attention reduction → stream fusion → candidate scoring.

use crate::encoder::{co_attention_stack_labeled, inject_memory, EncoderParams, MemoryCell};
use crate::error::{Error, Result, StageContext};
use crate::fusion::{fuse_example, FusionOutputs, FusionParams};
use crate::head::{attention_reduce, fuse_streams, score_candidates, HeadParams, CANDIDATES};
use crate::numerics::{Mode, ParamBuilder, ParamSet, RngState, Scalar, Tape, Var};
use crate::taskdata::{embed_example, make_subtask_inputs, EmbeddingParams, SceneExample, SubtaskInputs, Vocabulary};

use super::ModelConfig;

/// Query-stream and response-stream memory cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPair<T> {
    pub query: MemoryCell<T>,
    pub response: MemoryCell<T>,
}

impl<T: Scalar> MemoryPair<T> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        Ok(Self { query: MemoryCell::new(capacity, width)?, response: MemoryCell::new(capacity, width)? })
    }

    pub fn reset(&mut self) {
        self.query.reset();
        self.response.reset();
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub embedding: EmbeddingParams,
    pub fusion: Option<FusionParams<T>>,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub memory: MemoryPair<T>,
    empty_memory: MemoryPair<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 × 4` candidate logits.
    pub logits: Var,
    /// Attention-reduced query summary per candidate.
    pub query_summaries: Vec<Var>,
    /// Attention-reduced response summary per candidate.
    pub response_summaries: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; initialization draws from `seed` only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = RngState::derive(seed, &[0x1417]);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let d = config.d_model;
        let embedding = b.scope("embedding", |s| EmbeddingParams::new(s, config.vocab_size, config.d_obj, d, config.embedding_init_std, config.object_init_std))?;
        let fusion = if config.fusion {
            Some(b.scope("fusion", |s| FusionParams::new(s, d, config.heads, config.max_objects, config.layer_norm_eps))?)
        } else {
            None
        };
        let encoder = b.scope("encoder", |s| {
            EncoderParams::new(s, config.blocks, d, config.heads, config.d_ff, config.dropout, config.layer_norm_eps)
        })?;
        let head = b.scope("head", |s| {
            HeadParams::new(s, d, config.reduce_width(), config.head_hidden, config.head_dropout, config.layer_norm_eps)
        })?;
        if let (Some(fp), true) = (&fusion, config.fusion_identity_init) {
            let mut init_rng = RngState::derive(seed, &[0x1417, 1]);
            fp.init_near_identity(&mut params, &mut init_rng, 0.1);
        }
        let memory = MemoryPair::new(config.memory_capacity, d)?;
        Ok(Self { empty_memory: memory.clone(), memory, config, params, embedding, fusion, encoder, head })
    }

    /// Memory the forward pass reads in `mode`: the live cells in training,
    /// empty cells at evaluation unless configured to persist.
    pub fn memory_view(&self, mode: Mode) -> Option<&MemoryPair<T>> {
        if !self.config.memory {
            return None;
        }
        match mode {
            Mode::Train => Some(&self.memory),
            Mode::Eval if self.config.memory_at_eval => Some(&self.memory),
            Mode::Eval => Some(&self.empty_memory),
        }
    }

    /// Eval-mode logits for one example.
    pub fn logits(&self, example: &SceneExample, vocab: &Vocabulary) -> Result<Vec<T>> {
        let inputs = make_subtask_inputs(example, self.config.subtask)?;
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let out = forward(&mut tape, self, example, &inputs, vocab, self.memory_view(Mode::Eval))?;
        Ok(tape.value(out.logits).to_vec())
    }
}

/// Runs the whole model on one example, recording onto `tape`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    example: &SceneExample,
    inputs: &SubtaskInputs,
    vocab: &Vocabulary,
    memory: Option<&MemoryPair<T>>,
) -> Result<ForwardOutput> {
    if inputs.responses.len() != CANDIDATES {
        return Err(Error::Input(format!("example {} has {} candidates", example.id, inputs.responses.len())))
            .stage("embedding");
    }
    let longest = std::iter::once(&inputs.query).chain(&inputs.responses).map(Vec::len).max().unwrap_or(0);
    if longest > model.config.max_tokens || example.objects.len() > model.config.max_objects {
        return Err(Error::shape(
            "forward",
            format!("example {} exceeds max_tokens/max_objects ({longest} tokens, {} objects)", example.id, example.objects.len()),
        ))
        .stage("embedding");
    }
    let emb = embed_example(tape, example, inputs, vocab, &model.embedding).stage("embedding")?;

    let fused = match &model.fusion {
        Some(fp) => fuse_example(tape, emb.query, &emb.responses, emb.objects, fp).stage("fusion")?,
        None => concat_without_fusion(tape, emb.query, &emb.responses, emb.objects).stage("fusion")?,
    };

    let mut candidates = Vec::with_capacity(CANDIDATES);
    let mut query_summaries = Vec::with_capacity(CANDIDATES);
    let mut response_summaries = Vec::with_capacity(CANDIDATES);
    for (i, &r_o) in fused.r_o.iter().enumerate() {
        let label = format!("candidate{i}.encoder");
        let (mut zq, mut zr) = co_attention_stack_labeled(tape, fused.q_o, r_o, &model.encoder, &label).stage("encoder")?;
        if let Some(mem) = memory {
            zq = inject_memory(tape, zq, &mem.query, &model.encoder).stage("encoder")?;
            zr = inject_memory(tape, zr, &mem.response, &model.encoder).stage("encoder")?;
        }
        let head = &model.head;
        let (sq, _) = attention_reduce(tape, zq, &head.reduce_query, &format!("candidate{i}.query")).stage("head")?;
        let (sr, _) = attention_reduce(tape, zr, &head.reduce_response, &format!("candidate{i}.response")).stage("head")?;
        candidates.push(fuse_streams(tape, sq, sr, head).stage("head")?);
        query_summaries.push(sq);
        response_summaries.push(sr);
    }
    let logits = score_candidates(tape, &candidates, &model.head).stage("head")?;
    Ok(ForwardOutput { logits, query_summaries, response_summaries })
}

/// Ablation stand-in for the fusion layer: each text sequence gets the
/// mean-pooled object features appended as one extra row.
fn concat_without_fusion<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, responses: &[Var], objects: Var) -> Result<FusionOutputs> {
    let pooled = tape.mean_rows(objects);
    let q_o = tape.concat_rows(&[query, pooled])?;
    let r_o = responses.iter().map(|&r| tape.concat_rows(&[r, pooled])).collect::<Result<Vec<_>>>()?;
    Ok(FusionOutputs { q_o, r_o })
}
