use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelVolume, Scalar, Volume};
use crate::unet::ModelConfig;

/// One training example cut from a volume: the input tile and the label and
/// weight tiles covering the network's output region.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTile<T> {
    pub input: Volume<T>,
    pub labels: LabelVolume,
    pub weights: Volume<T>,
    /// Input tile origin in the source volume.
    pub origin: [usize; 3],
    /// Output region origin in the source volume.
    pub output_origin: [usize; 3],
}

/// Output extents and the per-axis offset of the output region inside an
/// input tile.
pub fn output_region(config: &ModelConfig, tile: [usize; 3]) -> Result<([usize; 3], [usize; 3])> {
    let out = config.check_tile(tile)?;
    Ok((out, [0, 1, 2].map(|a| (tile[a] - out[a]) / 2)))
}

/// Cuts a random valid tile. With `lesion_bias`, half of the draws place a
/// randomly chosen foreground voxel inside the output region whenever one is
/// reachable.
pub fn sample_training_tile<T: Scalar>(
    image: &Volume<T>,
    labels: &LabelVolume,
    weights: &Volume<T>,
    config: &ModelConfig,
    tile: [usize; 3],
    seed: u64,
    lesion_bias: bool,
) -> Result<TrainingTile<T>> {
    let ext = image.extents();
    if labels.extents() != ext || weights.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "image {}, labels {:?} and weights {} are not aligned",
            image.shape(),
            labels.extents(),
            weights.shape()
        )));
    }
    if image.channels() != config.in_channels {
        return Err(Error::Shape(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            config.in_channels
        )));
    }
    let (out, offset) = output_region(config, tile)?;
    if (0..3).any(|a| tile[a] > ext[a]) {
        return Err(Error::Tiling(format!(
            "input tile {tile:?} does not fit in volume extents {ext:?}"
        )));
    }
    let room = [0, 1, 2].map(|a| ext[a] - tile[a]);
    let mut r = rng::stream(seed, 0);
    let biased = lesion_bias && rng::uniform(seed, 1) < 0.5;

    let mut origin = None;
    if biased {
        let [_, h, w] = ext;
        let reachable: Vec<[usize; 3]> = labels
            .data()
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l != 0)
            .map(|(i, _)| [i / (h * w), (i / w) % h, i % w])
            .filter(|v| (0..3).all(|a| v[a] >= offset[a] && v[a] < offset[a] + room[a] + out[a]))
            .collect();
        if !reachable.is_empty() {
            let v = reachable[r.random_range(0..reachable.len())];
            origin = Some([0, 1, 2].map(|a| {
                let lo = (v[a] + 1).saturating_sub(offset[a] + out[a]);
                let hi = (v[a] - offset[a]).min(room[a]);
                r.random_range(lo..=hi)
            }));
        }
    }
    let origin = origin.unwrap_or_else(|| room.map(|m| r.random_range(0..=m)));
    let output_origin = [0, 1, 2].map(|a| origin[a] + offset[a]);
    Ok(TrainingTile {
        input: image.extract(origin, tile)?,
        labels: labels.extract(output_origin, out)?,
        weights: weights.extract(output_origin, out)?,
        origin,
        output_origin,
    })
}
