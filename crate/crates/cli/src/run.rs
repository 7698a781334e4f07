use std::fs;
use std::path::{Path, PathBuf};

use bleedseg_core::data::{read_labels_vvol, read_vvol, Manifest, ManifestEntry, Split};
use bleedseg_core::preprocess::Pipeline;
use bleedseg_core::train::TrainConfig;
use bleedseg_core::{Error, LabelVolume, Result, Scalar, Volume};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A training run: the training configuration plus the files it reads and
/// writes. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub manifest: PathBuf,
    #[serde(default)]
    pub pipeline: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    #[serde(default)]
    pub grid_csv: Option<PathBuf>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: RunConfig = read_json(path, "run config")?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.manifest);
        fix(&mut c.checkpoint);
        fix(&mut c.loss_csv);
        c.pipeline.as_mut().map(fix);
        c.grid_csv.as_mut().map(fix);
        c.train.validate()?;
        Ok(c)
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        match &self.pipeline {
            Some(p) => read_json(p, "pipeline"),
            None => Ok(Pipeline::default()),
        }
    }

    /// Labelled volumes of one split with the pipeline applied.
    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<(Manifest, Vec<(Volume<T>, LabelVolume)>)> {
        let (manifest, base) = Manifest::load(&self.manifest)?;
        if manifest.num_classes != self.train.model.num_classes {
            return Err(Error::Config(format!(
                "manifest has {} classes, model has {}",
                manifest.num_classes, self.train.model.num_classes
            )));
        }
        let pipeline = self.pipeline()?;
        let mut out = Vec::new();
        for (i, e) in manifest.entries.iter().enumerate().filter(|(_, e)| e.split == split) {
            let (image, labels) = load_pair(&base, e)?;
            let (image, labels) = pipeline.apply(&image, labels.as_ref(), i as u64)?;
            let labels = labels.ok_or_else(|| Error::Config(format!("{} has no label volume", e.image.display())))?;
            out.push((image.cast::<T>(), labels));
        }
        Ok((manifest, out))
    }
}

pub fn load_pair(base: &Path, e: &ManifestEntry) -> Result<(Volume<f32>, Option<LabelVolume>)> {
    let (image, _) = read_vvol(base.join(&e.image))?;
    let labels = match &e.label {
        Some(l) => Some(read_labels_vvol(base.join(l))?.0),
        None => None,
    };
    Ok((image, labels))
}
