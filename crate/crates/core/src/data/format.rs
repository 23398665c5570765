//! JSON-lines dataset files.
//!
//! Line 1 is a header `{"version":1,"J":..,"K":..,"class_names":[..]}`; every
//! following line is one sequence record. Writing is canonical: compact JSON,
//! fixed key order, shortest round-trip floats, one trailing newline per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sequence::{DatasetManifest, Joint, SkeletonSequence, Split};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "J")]
    joints: usize,
    #[serde(rename = "K")]
    classes: usize,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: usize,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    person: Option<u32>,
    frames: Vec<Vec<Joint>>,
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text)
}

pub fn parse_dataset_str(text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    let Some((_, header_line)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "missing header line".into(),
        });
    };
    let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "unsupported dataset version {} (expected {FORMAT_VERSION})",
                header.version
            ),
        });
    }
    let mut manifest = DatasetManifest::new(header.joints, header.classes, header.class_names);
    if manifest.class_names.len() != manifest.classes {
        return Err(Error::Schema(format!(
            "{} class names for {} classes",
            manifest.class_names.len(),
            manifest.classes
        )));
    }
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let seq = SkeletonSequence {
            source_id: record.source.unwrap_or_else(|| record.id.clone()),
            id: record.id,
            person_id: record.person,
            label: record.label,
            split: record.split,
            frames: record.frames,
        };
        seq.validate(manifest.joints, manifest.classes)?;
        manifest.sequences.push(seq);
    }
    Ok(manifest)
}

pub fn write_dataset_string(manifest: &DatasetManifest) -> Result<String> {
    manifest.validate()?;
    let header = Header {
        version: FORMAT_VERSION,
        joints: manifest.joints,
        classes: manifest.classes,
        class_names: manifest.class_names.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for seq in &manifest.sequences {
        let record = Record {
            id: seq.id.clone(),
            label: seq.label,
            split: seq.split,
            source: (seq.source_id != seq.id).then(|| seq.source_id.clone()),
            person: seq.person_id,
            frames: seq.frames.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = write_dataset_string(manifest)?;
    crate::model::write_atomic(path, text.as_bytes())
}
