//! Accuracy, mean average precision and the joint Q→AR protocol.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{Mode, Scalar, Tape, Tensor};
use crate::taskdata::{make_subtask_inputs, Dataset, Subtask};

use super::model::{forward, Model};

/// Scored candidates of one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

impl Prediction {
    pub fn new(id: String, scores: Vec<f64>, gold: usize) -> Self {
        let predicted = ranking(&scores)[0];
        Self { id, scores, predicted, gold }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }

    /// 1-based rank of the gold candidate.
    pub fn gold_rank(&self) -> usize {
        ranking(&self.scores).iter().position(|&i| i == self.gold).expect("gold index in range") + 1
    }
}

/// Candidate indices by descending score; ties (including -0 vs +0) go to
/// the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Adding +0 maps -0 to +0 so total_cmp sees them as equal.
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b)));
    order
}

/// Average precision with a single relevant candidate: 1 / rank(gold).
pub fn average_precision(scores: &[f64], gold: usize) -> f64 {
    let rank = ranking(scores).iter().position(|&i| i == gold).expect("gold index in range") + 1;
    1.0 / rank as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subtask: Subtask,
    pub accuracy: f64,
    pub map: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
    pub examples: usize,
}

/// Accuracy and mAP over predictions; `mean_loss` is the mean cross-entropy
/// of the candidate scores.
pub fn metrics_from_predictions(subtask: Subtask, preds: &[Prediction]) -> MetricsReport {
    let n = preds.len();
    if n == 0 {
        return MetricsReport { subtask, accuracy: 0.0, map: 0.0, mean_loss: 0.0, loss_trace: Vec::new(), examples: 0 };
    }
    let mut correct = 0usize;
    let mut ap = 0.0;
    let mut loss = 0.0;
    for p in preds {
        correct += usize::from(p.correct());
        ap += average_precision(&p.scores, p.gold);
        let logits = Tensor::vector(p.scores.clone()).expect("non-empty scores");
        loss += crate::numerics::ops::cross_entropy(&logits, p.gold).map(|(l, _)| l).unwrap_or(f64::NAN);
    }
    MetricsReport {
        subtask,
        accuracy: correct as f64 / n as f64,
        map: ap / n as f64,
        mean_loss: loss / n as f64,
        loss_trace: Vec::new(),
        examples: n,
    }
}

/// Eval-mode predictions for every example, in dataset order.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset, subtask: Subtask) -> Result<Vec<Prediction>> {
    if subtask != model.config.subtask {
        return Err(Error::Input(format!("model was trained for {} but {subtask} was requested", model.config.subtask)));
    }
    model.config.check_dataset(data)?;
    let memory = model.memory_view(Mode::Eval);
    data.examples
        .iter()
        .map(|ex| {
            let inputs = make_subtask_inputs(ex, subtask)?;
            let mut tape = Tape::new(&model.params, Mode::Eval);
            let out = forward(&mut tape, model, ex, &inputs, &data.vocabulary, memory)?;
            let scores = tape.value(out.logits).iter().map(|v| v.to_f64_lossless()).collect();
            Ok(Prediction::new(ex.id.clone(), scores, inputs.gold))
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, subtask: Subtask) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict(model, data, subtask)?;
    Ok((metrics_from_predictions(subtask, &preds), preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub qa_accuracy: f64,
    pub qar_accuracy: f64,
    pub joint_accuracy: f64,
    pub examples: usize,
}

/// An example counts for Q→AR only when both its answer and its rationale
/// predictions are correct. Prediction lists must cover the same ids in the
/// same order.
pub fn join_qar(qa: &[Prediction], qar: &[Prediction]) -> Result<JointReport> {
    if qa.len() != qar.len() {
        return Err(Error::Input(format!("{} Q→A predictions vs {} QA→R predictions", qa.len(), qar.len())));
    }
    let mut both = 0usize;
    let (mut a, mut r) = (0usize, 0usize);
    for (i, (p, q)) in qa.iter().zip(qar).enumerate() {
        if p.id != q.id {
            return Err(Error::Input(format!("row {i}: id {:?} does not match {:?}", p.id, q.id)));
        }
        a += usize::from(p.correct());
        r += usize::from(q.correct());
        both += usize::from(p.correct() && q.correct());
    }
    let n = qa.len().max(1) as f64;
    Ok(JointReport {
        qa_accuracy: a as f64 / n,
        qar_accuracy: r as f64 / n,
        joint_accuracy: both as f64 / n,
        examples: qa.len(),
    })
}

/// Writes one JSON line per prediction.
pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| Error::Parse { location: format!("{}:{}", path.display(), i + 1), detail: e.to_string() })?;
        if p.scores.is_empty() || p.gold >= p.scores.len() || p.predicted != ranking(&p.scores)[0] {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                detail: "prediction is inconsistent with its scores".into(),
            });
        }
        preds.push(p);
    }
    Ok(preds)
}
