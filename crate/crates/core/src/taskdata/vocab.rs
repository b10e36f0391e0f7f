use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const SEP_TOKEN: &str = "<sep>";
pub const PAD: usize = 0;
pub const SEP: usize = 1;
const FIRST_TAG: usize = 2;

/// Bijective token ↔ id map. Ids 0 and 1 are padding and the query/answer
/// separator; ids `2..2+tag_count` are the object tags `[0]`, `[1]`, ….
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tag_count: usize,
}

pub fn tag_string(k: usize) -> String {
    format!("[{k}]")
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S], tag_count: usize) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), SEP_TOKEN.to_string()];
        tokens.extend((0..tag_count).map(tag_string));
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its serialized token list, checking the
    /// reserved layout.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIRST_TAG || tokens[PAD] != PAD_TOKEN || tokens[SEP] != SEP_TOKEN {
            return Err(Error::Config("vocabulary must start with <pad>, <sep>".into()));
        }
        let tag_count = tokens[FIRST_TAG..]
            .iter()
            .enumerate()
            .take_while(|(k, t)| **t == tag_string(*k))
            .count();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Config(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index, tag_count })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tag_count(&self) -> usize {
        self.tag_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag_token(&self, k: usize) -> Option<usize> {
        (k < self.tag_count).then_some(FIRST_TAG + k)
    }

    /// Object tag referenced by a token id, if it is a tag token.
    pub fn tag_of(&self, id: usize) -> Option<usize> {
        (FIRST_TAG..FIRST_TAG + self.tag_count).contains(&id).then(|| id - FIRST_TAG)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::Input(format!("unknown token {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}
