//! Whole-model gradient verification.

use crate::error::Result;
use crate::numerics::{grad_check, GradCheckReport, Mode, RngState, Tape};
use crate::taskdata::{make_subtask_inputs, Dataset, GeneratorConfig, SceneExample};

use super::model::{forward, Model};
use super::ModelConfig;

/// Central-difference step for whole-model checks.
pub const GRADCHECK_EPS: f64 = 1e-6;

/// A two-object example whose query is cut to `query_tokens` tokens.
pub fn tiny_example(seed: u64, query_tokens: usize) -> Result<Dataset> {
    let gen = GeneratorConfig { examples: 1, min_objects: 2, max_objects: 2, seed, ..GeneratorConfig::default() };
    let mut data = Dataset::generate(&gen, seed)?;
    let ex: &mut SceneExample = &mut data.examples[0];
    ex.query.truncate(query_tokens.max(1));
    Ok(data)
}

/// Checks every parameter of a double-precision model on one example with
/// dropout off and empty memory. `max_coords` caps the coordinates sampled per
/// tensor; `None` checks all of them.
pub fn model_grad_check(config: &ModelConfig, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let data = tiny_example(seed, 4)?;
    let mut config = config.clone();
    config.resolve_for(&data)?;
    let mut model = Model::<f64>::new(config, seed)?;
    let example = &data.examples[0];
    let inputs = make_subtask_inputs(example, model.config.subtask)?;
    let mut params = std::mem::take(&mut model.params);
    let mut rng = RngState::derive(seed, &[0x6C4E]);
    let sampler = max_coords.map(|k| (k, &mut rng));
    let report = grad_check(&mut params, GRADCHECK_EPS, sampler, |p| {
        let mut tape = Tape::new(p, Mode::Eval);
        let out = forward(&mut tape, &model, example, &inputs, &data.vocabulary, model.memory_view(Mode::Eval))?;
        let loss = tape.cross_entropy(out.logits, inputs.gold)?;
        let value = tape.scalar(loss);
        Ok((value, tape.backward(loss)?))
    })?;
    model.params = params;
    Ok(report)
}
