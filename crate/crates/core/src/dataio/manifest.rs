use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CprError, Result};

/// Dataset manifest: `{"train", "test", "anchors", "text", "split": {"base", "new"}}`.
///
/// Relative paths are resolved against the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    /// Class-template text embeddings used as frozen textual prototypes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitJson {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CprError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        m.resolve(root);
        Ok(m)
    }

    fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.test);
        if let Some(p) = &mut self.anchors {
            fix(p);
        }
        if let Some(p) = &mut self.text {
            fix(p);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s + "\n").map_err(|e| CprError::io(path, e))
    }

    pub fn split_spec(&self, num_classes: usize) -> Result<Option<SplitSpec>> {
        self.split
            .as_ref()
            .map(|s| SplitSpec::new(s.base.clone(), s.new.clone(), num_classes))
            .transpose()
    }
}

/// Disjoint base and new class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    base: Vec<usize>,
    new: Vec<usize>,
}

impl SplitSpec {
    pub fn new(base: Vec<usize>, new: Vec<usize>, num_classes: usize) -> Result<Self> {
        let b: BTreeSet<usize> = base.iter().copied().collect();
        let n: BTreeSet<usize> = new.iter().copied().collect();
        if b.len() != base.len() || n.len() != new.len() {
            return Err(CprError::Split("duplicate class index in split".into()));
        }
        if let Some(c) = b.intersection(&n).next() {
            return Err(CprError::Split(format!("class {c} is both base and new")));
        }
        if let Some(&c) = b.union(&n).find(|&&c| c >= num_classes) {
            return Err(CprError::Split(format!(
                "class {c} out of range for {num_classes} classes"
            )));
        }
        if b.is_empty() {
            return Err(CprError::Split("base class set is empty".into()));
        }
        Ok(Self {
            base: b.into_iter().collect(),
            new: n.into_iter().collect(),
        })
    }

    /// First half of the classes as base, the rest as new.
    pub fn halves(num_classes: usize) -> Result<Self> {
        let cut = num_classes.div_ceil(2);
        Self::new((0..cut).collect(), (cut..num_classes).collect(), num_classes)
    }

    pub fn base(&self) -> &[usize] {
        &self.base
    }

    pub fn new_classes(&self) -> &[usize] {
        &self.new
    }
}
