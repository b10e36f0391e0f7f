//! Synthetic scenes with grounded multiple-choice questions.
//!
//! A scene holds 2+ objects, each carrying one value per attribute family
//! (e.g. color, shape, material). Within a scene, values of a family are
//! distinct across objects. Object features are one-hot blocks per family
//! plus Gaussian noise.
//!
//! Questions pick a target object either by its tag (`what color is [2] ?`)
//! or by one of its attribute values (`what color is the cube ?`). The answer
//! candidates are values of the asked family taken from the *other* objects
//! of the same scene, so the response text alone carries no signal and the
//! set of scene values alone does not say which belongs to the target.
//! Rationale candidates tag an object and state a value of a third family;
//! the correct one tags the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

use super::vocab::Vocabulary;
use super::{SceneExample, SceneObject};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFamily {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributeFamily {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self { name: name.into(), values: values.iter().map(|v| v.to_string()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub examples: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub families: Vec<AttributeFamily>,
    /// Standard deviation of the Gaussian noise added to object features.
    pub feature_noise: f64,
    /// Fraction of questions that describe the target instead of tagging it.
    pub described_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            examples: 2000,
            min_objects: 4,
            max_objects: 5,
            families: default_families(),
            feature_noise: 0.1,
            described_fraction: 0.0,
            seed: 0,
        }
    }
}

pub fn default_families() -> Vec<AttributeFamily> {
    vec![
        AttributeFamily::new("color", &["red", "green", "blue", "yellow", "purple", "orange", "white", "black"]),
        AttributeFamily::new("shape", &["cube", "sphere", "cylinder", "cone", "torus", "pyramid", "ring", "star"]),
        AttributeFamily::new("material", &["metal", "wood", "glass", "rubber", "stone", "paper", "cloth", "plastic"]),
    ]
}

const TEMPLATE_WORDS: [&str; 5] = ["what", "is", "the", "?", "it"];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.min_objects < 2 {
            return err(format!("scenes need at least 2 objects, min_objects = {}", self.min_objects));
        }
        if self.max_objects < self.min_objects {
            return err(format!("max_objects {} < min_objects {}", self.max_objects, self.min_objects));
        }
        if self.families.len() < 2 {
            return err("need at least two attribute families".into());
        }
        if self.described_fraction > 0.0 && self.families.len() < 3 {
            return err("described questions need at least three attribute families".into());
        }
        if !(0.0..=1.0).contains(&self.described_fraction) {
            return err(format!("described_fraction {} outside [0, 1]", self.described_fraction));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return err(format!("feature_noise {} must be a finite non-negative value", self.feature_noise));
        }
        let need = self.max_objects.max(4);
        for f in &self.families {
            if f.values.len() < need {
                return err(format!(
                    "family {} has {} values; {} objects and 4 distinct candidates need {need}",
                    f.name,
                    f.values.len(),
                    self.max_objects
                ));
            }
        }
        // All surface words must be unique for the vocabulary to be bijective.
        self.vocabulary().map(|_| ())
    }

    pub fn d_obj(&self) -> usize {
        self.families.iter().map(|f| f.values.len()).sum()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        for f in &self.families {
            words.push(&f.name);
            words.extend(f.values.iter().map(String::as_str));
        }
        Vocabulary::new(&words, self.max_objects)
    }
}

struct Scene {
    /// values[f][i]: value index of family f for object i.
    values: Vec<Vec<usize>>,
}

/// Generates `config.examples` scenes; a pure function of `(config, seed)`.
/// Example `i` draws from its own stream derived from `(seed, i)`.
pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<Vec<SceneExample>> {
    config.validate()?;
    let vocab = config.vocabulary()?;
    (0..config.examples)
        .map(|i| {
            let mut rng = RngState::derive(seed, &[i as u64]);
            generate_example(config, &vocab, &mut rng, format!("{seed}-{i}"))
        })
        .collect()
}

fn word(vocab: &Vocabulary, w: &str) -> usize {
    vocab.id(w).expect("generator words are in the vocabulary")
}

fn generate_example(config: &GeneratorConfig, vocab: &Vocabulary, rng: &mut RngState, id: String) -> Result<SceneExample> {
    let span = config.max_objects - config.min_objects + 1;
    let n = config.min_objects + rng.below(span);
    let scene = Scene {
        values: config.families.iter().map(|f| rng.choose_distinct(f.values.len(), n)).collect(),
    };

    let objects = (0..n)
        .map(|i| {
            let mut features = Vec::with_capacity(config.d_obj());
            for (f, fam) in config.families.iter().enumerate() {
                for v in 0..fam.values.len() {
                    let hot = if scene.values[f][i] == v { 1.0 } else { 0.0 };
                    features.push(hot + config.feature_noise * rng.normal());
                }
            }
            SceneObject { features, tag: i }
        })
        .collect();

    let n_fam = config.families.len();
    let target = rng.below(n);
    let asked = rng.below(n_fam);
    let value_word = |f: usize, obj: usize| word(vocab, &config.families[f].values[scene.values[f][obj]]);
    let tag = |obj: usize| vocab.tag_token(obj).expect("tag within vocabulary");

    let described = n_fam >= 3 && rng.uniform() < config.described_fraction;
    let mut query = vec![word(vocab, "what"), word(vocab, &config.families[asked].name), word(vocab, "is")];
    let mut excluded = vec![asked];
    if described {
        let others: Vec<usize> = (0..n_fam).filter(|&f| f != asked).collect();
        let by = others[rng.below(others.len())];
        excluded.push(by);
        query.extend([word(vocab, "the"), value_word(by, target)]);
    } else {
        query.push(tag(target));
    }
    query.push(word(vocab, "?"));

    // Answers: the target's value of the asked family against other objects' values.
    let answer_seq = |v: usize| vec![word(vocab, "it"), word(vocab, "is"), word(vocab, &config.families[asked].values[v])];
    let correct_value = scene.values[asked][target];
    let mut distractor_values: Vec<usize> = (0..n).filter(|&j| j != target).map(|j| scene.values[asked][j]).collect();
    rng.shuffle(&mut distractor_values);
    distractor_values.truncate(3);
    fill_unused(&mut distractor_values, correct_value, config.families[asked].values.len(), rng);
    let distractors: Vec<Vec<usize>> = distractor_values.into_iter().map(answer_seq).collect();
    let (answers, answer_label) = place(answer_seq(correct_value), distractors, rng);

    // Rationales: "[j] is <value of j in a further family>"; the target is correct.
    let remaining: Vec<usize> = (0..n_fam).filter(|f| !excluded.contains(f)).collect();
    let fam_r = remaining[rng.below(remaining.len())];
    let rationale_seq = |obj: usize, v: usize| vec![tag(obj), word(vocab, "is"), word(vocab, &config.families[fam_r].values[v])];
    let mut others: Vec<usize> = (0..n).filter(|&j| j != target).collect();
    rng.shuffle(&mut others);
    others.truncate(3);
    let mut distractors: Vec<Vec<usize>> = others.iter().map(|&j| rationale_seq(j, scene.values[fam_r][j])).collect();
    if distractors.len() < 3 {
        // Too few objects: false statements about the target fill the rest.
        let mut wrong = Vec::new();
        fill_unused(&mut wrong, scene.values[fam_r][target], config.families[fam_r].values.len(), rng);
        for v in wrong.into_iter().take(3 - distractors.len()) {
            distractors.push(rationale_seq(target, v));
        }
    }
    let (rationales, rationale_label) = place(rationale_seq(target, scene.values[fam_r][target]), distractors, rng);

    Ok(SceneExample { id, objects, query, answers, answer_label, rationales, rationale_label })
}

/// Pads `values` to 3 entries with random values distinct from `correct` and each other.
fn fill_unused(values: &mut Vec<usize>, correct: usize, family_size: usize, rng: &mut RngState) {
    let mut pool: Vec<usize> = (0..family_size).filter(|v| *v != correct && !values.contains(v)).collect();
    rng.shuffle(&mut pool);
    while values.len() < 3 {
        values.push(pool.pop().expect("validated family size"));
    }
}

/// Inserts the correct sequence at a uniformly random position.
fn place(correct: Vec<usize>, distractors: Vec<Vec<usize>>, rng: &mut RngState) -> (Vec<Vec<usize>>, usize) {
    let label = rng.below(4);
    let mut out = distractors;
    out.insert(label, correct);
    (out, label)
}
