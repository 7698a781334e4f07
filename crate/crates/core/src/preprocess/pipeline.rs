use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelVolume, Scalar, Volume};

use super::clahe::{clahe_volume, ClaheParams};
use super::intensity::{apply_mask, intensity_jitter, normalize_intensity, threshold_roi};
use super::spatial::{
    affine_image, affine_labels, deform_image, deform_labels, resize_labels, resize_volume,
    AffineParams, DeformField,
};

/// One preprocessing or augmentation step, as written in a pipeline document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Clahe(ClaheParams),
    Normalize { lo: f64, hi: f64 },
    /// Zeroes voxels outside `[lo, hi]`.
    Threshold { lo: f64, hi: f64 },
    Resize { extents: [usize; 3] },
    Elastic { sigma: f64 },
    Affine { max_shift: f64, max_rotate: f64 },
    Jitter { scale: (f64, f64), offset: (f64, f64) },
}

/// Ordered steps replayed deterministically: the random steps of volume `i`
/// draw from seeds derived from `(seed, i, step)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: Vec<Step>,
}

impl Pipeline {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline document: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pipeline serializes")
    }

    /// Runs every step on `image` (and `labels` for spatial steps).
    pub fn apply<T: Scalar>(
        &self,
        image: &Volume<T>,
        labels: Option<&LabelVolume>,
        index: u64,
    ) -> Result<(Volume<T>, Option<LabelVolume>)> {
        if let Some(l) = labels {
            if l.extents() != image.extents() {
                return Err(Error::Shape(format!(
                    "image {} and labels {:?} are not aligned",
                    image.shape(),
                    l.extents()
                )));
            }
        }
        let mut img = image.clone();
        let mut lab = labels.cloned();
        let volume_seed = rng::derive_seed(self.seed, index);
        for (s, step) in self.steps.iter().enumerate() {
            let seed = rng::derive_seed(volume_seed, s as u64);
            match step {
                Step::Clahe(p) => img = clahe_volume(&img, p)?,
                Step::Normalize { lo, hi } => img = normalize_intensity(&img, *lo, *hi)?,
                Step::Threshold { lo, hi } => {
                    let mask = threshold_roi(&img, *lo, *hi)?;
                    img = apply_mask(&img, &mask)?;
                }
                Step::Resize { extents } => {
                    img = resize_volume(&img, *extents)?;
                    lab = lab.map(|l| resize_labels(&l, *extents)).transpose()?;
                }
                Step::Elastic { sigma } => {
                    let field = DeformField::generate(*sigma, seed)?;
                    img = deform_image(&img, &field)?;
                    lab = lab.map(|l| deform_labels(&l, &field)).transpose()?;
                }
                Step::Affine { max_shift, max_rotate } => {
                    let a = AffineParams::draw(seed, *max_shift, *max_rotate)?;
                    img = affine_image(&img, &a)?;
                    lab = lab.map(|l| affine_labels(&l, &a)).transpose()?;
                }
                Step::Jitter { scale, offset } => img = intensity_jitter(&img, seed, *scale, *offset)?,
            }
        }
        Ok((img, lab))
    }
}
