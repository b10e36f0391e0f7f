//! Mini-batch training. A run is a deterministic function of the two configs,
//! the dataset and the seed: batches are processed in a fixed order and each
//! example's dropout stream is derived from `(seed, step, position)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{Gradients, Mode, RngState, Scalar, Tape};
use crate::taskdata::{make_subtask_inputs, Dataset};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointView};
use super::eval::{evaluate, ranking};
use super::model::{forward, Model};
use super::optim::{clip_global_norm, Adam};
use super::{ModelConfig, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0xD809;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_map: Option<f64>,
}

/// Hooks into the training loop.
pub trait TrainObserver<T: Scalar> {
    /// Whether per-example tapes should record attention weights.
    fn wants_probes(&self) -> bool {
        false
    }

    /// Called after each example's forward and backward pass.
    fn on_example(&mut self, _step: u64, _tape: &Tape<'_, T>) {}
}

pub struct NoObserver;

impl<T: Scalar> TrainObserver<T> for NoObserver {}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step.
    pub loss_trace: Vec<f64>,
    pub step: u64,
    pub rng: RngState,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(self, train_config: &TrainConfig) -> Checkpoint<T> {
        let epoch = self.epochs.len() as u64;
        Checkpoint {
            model: self.model,
            train_config: Some(train_config.clone()),
            optimizer: Some(self.optimizer),
            rng: Some(self.rng.snapshot()),
            step: self.step,
            epoch,
        }
    }
}

pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    out_dir: Option<&Path>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    train_config.validate()?;
    let mut config = model_config.clone();
    config.resolve_for(data)?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let mut model = Model::<T>::new(config, train_config.seed)?;
    let mut optimizer = Adam::new(&train_config.optimizer, &model.params);
    let mut shuffle_rng = RngState::derive(train_config.seed, &[SHUFFLE_STREAM]);
    let subtask = model.config.subtask;
    let d = model.config.d_model;

    let mut epochs = Vec::with_capacity(train_config.epochs);
    let mut loss_trace = Vec::new();
    let mut metrics_lines = String::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    'epochs: for epoch in 0..train_config.epochs {
        model.memory.reset();
        order.sort_unstable();
        shuffle_rng.shuffle(&mut order);
        let (mut epoch_loss, mut epoch_correct, mut seen) = (0.0, 0usize, 0usize);

        for batch in order.chunks(train_config.batch_size) {
            let mut total = Gradients::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            let mut q_sum = vec![T::zero(); d];
            let mut r_sum = vec![T::zero(); d];
            let mut n_summaries = 0usize;
            for (pos, &idx) in batch.iter().enumerate() {
                let ex = &data.examples[idx];
                let inputs = make_subtask_inputs(ex, subtask)?;
                let rng = RngState::derive(train_config.seed, &[DROPOUT_STREAM, step, pos as u64]);
                let mut tape = Tape::new(&model.params, Mode::Train).with_rng(rng);
                if observer.wants_probes() {
                    tape = tape.with_probes();
                }
                let out = forward(&mut tape, &model, ex, &inputs, &data.vocabulary, model.memory_view(Mode::Train))?;
                let loss = tape.cross_entropy(out.logits, inputs.gold)?;
                let lv = tape.scalar(loss).to_f64_lossless();
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step} on example {}", ex.id)));
                }
                let scores: Vec<f64> = tape.value(out.logits).iter().map(|v| v.to_f64_lossless()).collect();
                epoch_correct += usize::from(ranking(&scores)[0] == inputs.gold);
                batch_loss += lv;
                tape.backward_into(loss, &mut total)?;
                for (&sq, &sr) in out.query_summaries.iter().zip(&out.response_summaries) {
                    for (acc, &v) in q_sum.iter_mut().zip(tape.value(sq)) {
                        *acc += v;
                    }
                    for (acc, &v) in r_sum.iter_mut().zip(tape.value(sr)) {
                        *acc += v;
                    }
                    n_summaries += 1;
                }
                observer.on_example(step, &tape);
            }
            let b = batch.len() as f64;
            total.scale(T::cast(1.0 / b));
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
            }
            clip_global_norm(&mut total, train_config.clip_norm);
            optimizer.update(&mut model.params, &total)?;
            if model.config.memory && n_summaries > 0 {
                let inv = T::cast(1.0 / n_summaries as f64);
                let q: Vec<T> = q_sum.iter().map(|&v| v * inv).collect();
                let r: Vec<T> = r_sum.iter().map(|&v| v * inv).collect();
                model.memory.query.write(&q)?;
                model.memory.response.write(&r)?;
            }
            step += 1;
            loss_trace.push(batch_loss / b);
            epoch_loss += batch_loss;
            seen += batch.len();
            if train_config.max_steps > 0 && step >= train_config.max_steps {
                epochs.push(finish_epoch(&model, epoch, step, epoch_loss, epoch_correct, seen, eval_data)?);
                write_progress(out_dir, &mut metrics_lines, epochs.last().unwrap())?;
                break 'epochs;
            }
        }
        let record = finish_epoch(&model, epoch, step, epoch_loss, epoch_correct, seen, eval_data)?;
        log::info!(
            "epoch {} step {} loss {:.4} train acc {:.3}{}",
            record.epoch,
            record.step,
            record.mean_loss,
            record.train_accuracy,
            record.eval_accuracy.map(|a| format!(" eval acc {a:.3}")).unwrap_or_default()
        );
        epochs.push(record);
        write_progress(out_dir, &mut metrics_lines, epochs.last().unwrap())?;
        let cadence = train_config.checkpoint_every;
        if let Some(dir) = out_dir {
            if cadence > 0 && (epoch + 1) % cadence == 0 && epoch + 1 < train_config.epochs {
                let ck = CheckpointView::training(&model, train_config, &optimizer, &shuffle_rng, step, epoch as u64 + 1);
                save_checkpoint(&dir.join(CHECKPOINT_FILE), &ck).map_err(partial_state)?;
            }
        }
    }

    let outcome = TrainOutcome { model, optimizer, epochs, loss_trace, step, rng: shuffle_rng };
    if let Some(dir) = out_dir {
        let ck = CheckpointView::training(&outcome.model, train_config, &outcome.optimizer, &outcome.rng, outcome.step, outcome.epochs.len() as u64);
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &ck).map_err(partial_state)?;
    }
    Ok(outcome)
}

fn finish_epoch<T: Scalar>(
    model: &Model<T>,
    epoch: usize,
    step: u64,
    loss: f64,
    correct: usize,
    seen: usize,
    eval_data: Option<&Dataset>,
) -> Result<EpochRecord> {
    let n = seen.max(1) as f64;
    let (eval_accuracy, eval_map) = match eval_data {
        Some(ev) => {
            let (m, _) = evaluate(model, ev, model.config.subtask)?;
            (Some(m.accuracy), Some(m.map))
        }
        None => (None, None),
    };
    Ok(EpochRecord {
        epoch,
        step,
        mean_loss: loss / n,
        train_accuracy: correct as f64 / n,
        examples: seen,
        eval_accuracy,
        eval_map,
    })
}

fn write_progress(out_dir: Option<&Path>, lines: &mut String, record: &EpochRecord) -> Result<()> {
    lines.push_str(&serde_json::to_string(record).expect("record serializes"));
    lines.push('\n');
    if let Some(dir) = out_dir {
        let path: PathBuf = dir.join(METRICS_FILE);
        atomic_write(&path, lines.as_bytes()).map_err(partial_state)?;
    }
    Ok(())
}

fn partial_state(e: Error) -> Error {
    log::warn!("training aborted while writing outputs; files on disk may hold an earlier state: {e}");
    e
}
