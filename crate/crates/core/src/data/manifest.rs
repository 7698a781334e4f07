use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vvol::{read_vvol_header, VvolDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image with its (optional) label volume. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>) -> Self {
        Manifest {
            num_classes: class_names.len(),
            class_names,
            entries: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Assigns the first 70% of `n` items to train, the next 15% to val and
    /// the rest to test.
    pub fn standard_split(index: usize, n: usize) -> Split {
        let train = (n as f64 * 0.7).round() as usize;
        let val = (n as f64 * 0.15).round() as usize;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and returns it with the directory its paths are
    /// relative to.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    /// Checks class names, split disjointness, file existence and that every
    /// image/label pair agrees in spatial extent.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.num_classes < 2 || self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "manifest declares {} classes with {} names",
                self.num_classes,
                self.class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) {
                return Err(Error::Config(format!(
                    "image {} is listed more than once",
                    e.image.display()
                )));
            }
            let img = read_vvol_header(base.join(&e.image))?;
            if img.dtype != VvolDType::F32 {
                return Err(Error::Format(format!("{} is not a float volume", e.image.display())));
            }
            if let Some(label) = &e.label {
                let lab = read_vvol_header(base.join(label))?;
                if lab.dtype != VvolDType::U8 || lab.shape.extents() != img.shape.extents() {
                    return Err(Error::Shape(format!(
                        "label {} ({}) does not match image {} ({})",
                        label.display(),
                        lab.shape,
                        e.image.display(),
                        img.shape
                    )));
                }
            }
        }
        Ok(())
    }
}
