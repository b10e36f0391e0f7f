//! Synthetic grounded multiple-choice data: generation, subtask views,
//! embedding and line-delimited storage.

mod embed;
mod generator;
mod io;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::CANDIDATES;

pub use embed::{embed_example, EmbeddedExample, EmbeddingParams};
pub use generator::{default_families, generate_dataset, AttributeFamily, GeneratorConfig};
pub use io::{load_dataset, save_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use vocab::{tag_string, Vocabulary, PAD, PAD_TOKEN, SEP, SEP_TOKEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub features: Vec<f64>,
    pub tag: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneExample {
    pub id: String,
    pub objects: Vec<SceneObject>,
    pub query: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub answer_label: usize,
    pub rationales: Vec<Vec<usize>>,
    pub rationale_label: usize,
}

impl SceneExample {
    /// Index into `objects` of the object carrying `tag`.
    pub fn object_with_tag(&self, tag: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.tag == tag)
    }

    pub fn validate(&self, vocab: &Vocabulary, d_obj: usize) -> Result<()> {
        let bad = |detail: String| Err(Error::Data { id: self.id.clone(), detail });
        if self.objects.len() < 2 {
            return bad(format!("{} objects, need at least 2", self.objects.len()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.features.len() != d_obj {
                return bad(format!("object {i} has {} features, expected {d_obj}", o.features.len()));
            }
            if o.features.iter().any(|v| !v.is_finite()) {
                return bad(format!("object {i} has non-finite features"));
            }
            if self.objects[..i].iter().any(|p| p.tag == o.tag) {
                return bad(format!("tag {} used by two objects", o.tag));
            }
        }
        if self.answers.len() != CANDIDATES || self.rationales.len() != CANDIDATES {
            return bad(format!(
                "{} answers and {} rationales, expected {CANDIDATES} each",
                self.answers.len(),
                self.rationales.len()
            ));
        }
        if self.answer_label >= CANDIDATES || self.rationale_label >= CANDIDATES {
            return bad(format!("labels {}/{} out of range", self.answer_label, self.rationale_label));
        }
        let seqs = std::iter::once(&self.query).chain(&self.answers).chain(&self.rationales);
        for seq in seqs {
            if seq.is_empty() {
                return bad("empty token sequence".into());
            }
            for &t in seq {
                if t >= vocab.len() || t == PAD {
                    return bad(format!("token id {t} is not a content token"));
                }
                if let Some(tag) = vocab.tag_of(t) {
                    if self.object_with_tag(tag).is_none() {
                        return bad(format!("tag {} references no object", tag_string(tag)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A generated or loaded dataset with the vocabulary its token ids refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub d_obj: usize,
    /// Attribute schema the scenes were drawn from, when known.
    pub families: Vec<AttributeFamily>,
    pub examples: Vec<SceneExample>,
}

impl Dataset {
    pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            vocabulary: config.vocabulary()?,
            d_obj: config.d_obj(),
            families: config.families.clone(),
            examples: generate_dataset(config, seed)?,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.examples.iter().try_for_each(|e| e.validate(&self.vocabulary, self.d_obj))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    /// Question → answer.
    Qa,
    /// Question + correct answer → rationale.
    Qar,
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subtask::Qa => "qa",
            Subtask::Qar => "qar",
        })
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qa" => Ok(Subtask::Qa),
            "qar" => Ok(Subtask::Qar),
            other => Err(Error::Input(format!("unknown subtask {other:?} (expected qa or qar)"))),
        }
    }
}

/// Query, candidate responses and gold index for one subtask view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubtaskInputs {
    pub query: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    pub gold: usize,
}

/// Q→A: question against the answers. QA→R: question ⧺ `<sep>` ⧺ correct
/// answer against the rationales.
pub fn make_subtask_inputs(example: &SceneExample, subtask: Subtask) -> Result<SubtaskInputs> {
    let check = |label: usize, n: usize| {
        if label >= n {
            Err(Error::Data { id: example.id.clone(), detail: format!("label {label} for {n} candidates") })
        } else {
            Ok(())
        }
    };
    match subtask {
        Subtask::Qa => {
            check(example.answer_label, example.answers.len())?;
            Ok(SubtaskInputs { query: example.query.clone(), responses: example.answers.clone(), gold: example.answer_label })
        }
        Subtask::Qar => {
            check(example.answer_label, example.answers.len())?;
            check(example.rationale_label, example.rationales.len())?;
            let mut query = example.query.clone();
            query.push(SEP);
            query.extend_from_slice(&example.answers[example.answer_label]);
            Ok(SubtaskInputs { query, responses: example.rationales.clone(), gold: example.rationale_label })
        }
    }
}
