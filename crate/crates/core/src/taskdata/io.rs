//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"format", "version", "d_obj", "vocabulary", "families"}`;
//! every following line is one [`SceneExample`]. Floats are written with
//! shortest round-trip formatting and parsed back exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

use super::{AttributeFamily, Dataset, SceneExample, Vocabulary};

pub const DATASET_FORMAT: &str = "vcr-synthetic-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d_obj: usize,
    vocabulary: Vec<String>,
    #[serde(default)]
    families: Vec<AttributeFamily>,
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        d_obj: dataset.d_obj,
        vocabulary: dataset.vocabulary.tokens().to_vec(),
        families: dataset.families.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for ex in &dataset.examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub(crate) fn parse_dataset(text: &str, source: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { location: format!("{source}:1"), detail: "missing header line".into() })?;
    let header: Header = serde_json::from_str(first)
        .map_err(|e| Error::Parse { location: format!("{source}:1"), detail: e.to_string() })?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse { location: format!("{source}:1"), detail: format!("unknown format {:?}", header.format) });
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Version { found: header.version, expected: DATASET_VERSION });
    }
    let vocabulary = Vocabulary::from_tokens(header.vocabulary)?;
    let mut examples = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let ex: SceneExample = serde_json::from_str(line)
            .map_err(|e| Error::Parse { location: format!("{source}:{}", i + 1), detail: e.to_string() })?;
        ex.validate(&vocabulary, header.d_obj)?;
        examples.push(ex);
    }
    Ok(Dataset { vocabulary, d_obj: header.d_obj, families: header.families, examples })
}
