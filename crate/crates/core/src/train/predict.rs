use crate::error::{Error, Result};
use crate::nn::softmax_voxelwise;
use crate::tensor::{LabelVolume, Scalar, Volume};
use crate::unet::Model;

/// Dense prediction for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub labels: LabelVolume,
    /// Per-class softmax probabilities.
    pub probs: Volume<T>,
}

/// Output-region origins along one axis: consecutive, non-overlapping, with
/// the last one shifted inward to end exactly at `len`.
pub fn tile_origins(len: usize, out: usize) -> Vec<usize> {
    if len <= out {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..len - out).step_by(out).collect();
    v.push(len - out);
    v
}

/// Index of the largest value per voxel; ties go to the lowest class.
pub fn argmax_labels<T: Scalar>(probs: &Volume<T>) -> Result<LabelVolume> {
    let n = probs.shape().channel_len();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..probs.channels() {
                if probs.data()[c * n + v] > probs.data()[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::from_vec(probs.extents(), data)
}

/// Tiled inference over a whole volume. The volume is zero-padded by half
/// the valid-convolution margin on each side so every voxel is covered by
/// an output region.
pub fn predict_volume<T: Scalar>(model: &Model<T>, image: &Volume<T>, tile: [usize; 3]) -> Result<Prediction<T>> {
    let cfg = model.config();
    let out = cfg.check_tile(tile)?;
    if image.channels() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            cfg.in_channels
        )));
    }
    let ext = image.extents();
    let half = [0, 1, 2].map(|a| (tile[a] - out[a]) / 2);
    let covered = [0, 1, 2].map(|a| ext[a].max(out[a]));
    let padded = image.pad(half, [0, 1, 2].map(|a| tile[a] - out[a] - half[a] + covered[a] - ext[a]))?;
    let mut probs = Volume::zeros(image.shape().with_channels(cfg.num_classes).with_extents(covered))?;
    let origins = [0, 1, 2].map(|a| tile_origins(covered[a], out[a]));
    for &z in &origins[0] {
        for &y in &origins[1] {
            for &x in &origins[2] {
                let input = padded.extract([z, y, x], tile)?;
                let p = softmax_voxelwise(&model.infer(&input)?)?;
                probs.insert([z, y, x], &p)?;
            }
        }
    }
    if covered != ext {
        probs = probs.extract([0, 0, 0], ext)?;
    }
    Ok(Prediction {
        labels: argmax_labels(&probs)?,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::unet::ModelConfig;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            depth: 1,
            base_channels: 2,
            num_classes: 3,
            dtype: crate::DType::F64,
            ..ModelConfig::canonical()
        };
        Model::build(&cfg, 7).unwrap()
    }

    fn image(ext: [usize; 3]) -> Volume<f64> {
        Volume::from_fn(Shape::spatial(ext).unwrap(), |_, z, y, x| {
            ((z * 7 + y * 3 + x * 5) % 11) as f64 / 10.0
        })
        .unwrap()
    }

    #[test]
    fn origins() {
        assert_eq!(tile_origins(10, 4), vec![0, 4, 6]);
        assert_eq!(tile_origins(8, 4), vec![0, 4]);
        assert_eq!(tile_origins(3, 4), vec![0]);
    }

    #[test]
    fn one_tile_matches_direct_inference() {
        let m = model();
        let img = image([4, 4, 4]);
        let pred = predict_volume(&m, &img, [20, 20, 20]).unwrap();
        let direct = softmax_voxelwise(&m.infer(&img.pad([8; 3], [8; 3]).unwrap()).unwrap()).unwrap();
        assert_eq!(pred.probs, direct);
        assert_eq!(pred.labels, argmax_labels(&direct).unwrap());
    }

    #[test]
    fn stitched_equals_large_tile() {
        let m = model();
        let img = image([12, 8, 16]);
        let small = predict_volume(&m, &img, [20, 20, 20]).unwrap();
        let large = predict_volume(&m, &img, [28, 24, 32]).unwrap();
        assert_eq!(small, large);
    }

    #[test]
    fn ragged_volumes_and_stability() {
        let m = model();
        let img = image([5, 9, 3]);
        let a = predict_volume(&m, &img, [20, 20, 20]).unwrap();
        assert_eq!(a.labels.extents(), [5, 9, 3]);
        assert_eq!(a.probs.channels(), 3);
        assert_eq!(a, predict_volume(&m, &img, [20, 20, 20]).unwrap());
        assert!(matches!(predict_volume(&m, &img, [21, 20, 20]), Err(Error::Tiling(_))));
    }
}
