use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One joint position `(x, y, z)` in meters.
pub type Joint = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A single-person skeleton sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    /// Recording this sequence came from; person tracks split from one
    /// recording share it and are scored together at test time.
    pub source_id: String,
    pub person_id: Option<u32>,
    pub label: usize,
    pub split: Split,
    /// `frames[t][k]` is the position of joint `k` at frame `t`.
    pub frames: Vec<Vec<Joint>>,
}

impl SkeletonSequence {
    pub fn new(id: impl Into<String>, label: usize, split: Split, frames: Vec<Vec<Joint>>) -> Self {
        let id = id.into();
        Self {
            source_id: id.clone(),
            id,
            person_id: None,
            label,
            split,
            frames,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    /// Checks the per-sequence invariants against a dataset's `J` and `K`.
    pub fn validate(&self, joints: usize, classes: usize) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Schema(format!("sequence {:?} has no frames", self.id)));
        }
        if let Some((t, f)) = self.frames.iter().enumerate().find(|(_, f)| f.len() != joints) {
            return Err(Error::Schema(format!(
                "sequence {:?} frame {t} has {} joints, dataset has {joints}",
                self.id,
                f.len()
            )));
        }
        if self.label >= classes {
            return Err(Error::Schema(format!(
                "sequence {:?} label {} out of range for {classes} classes",
                self.id, self.label
            )));
        }
        if self.frames.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "sequence {:?} has non-finite coordinates",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub joints: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub sequences: Vec<SkeletonSequence>,
}

impl DatasetManifest {
    pub fn new(joints: usize, classes: usize, class_names: Vec<String>) -> Self {
        Self {
            joints,
            classes,
            class_names,
            sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.classes {
            return Err(Error::Schema(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        self.sequences
            .iter()
            .try_for_each(|s| s.validate(self.joints, self.classes))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SkeletonSequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}
