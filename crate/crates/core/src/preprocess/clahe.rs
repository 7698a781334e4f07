use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Volume};

/// Contrast-limited adaptive histogram equalization settings for one axial
/// slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub tiles_y: usize,
    pub tiles_x: usize,
    /// Bin ceiling as a multiple of the uniform bin height.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles_y: 8,
            tiles_x: 8,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_y == 0 || self.tiles_x == 0 {
            return Err(Error::Parameter("CLAHE needs at least one tile per axis".into()));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Parameter(format!(
                "CLAHE clip limit {} is below 1",
                self.clip_limit
            )));
        }
        if self.bins < 2 {
            return Err(Error::Parameter(format!("CLAHE needs at least 2 bins, got {}", self.bins)));
        }
        Ok(())
    }
}

fn quantize(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Clipped, redistributed and accumulated histogram of one tile, in units of
/// the tile's pixel count so that equal-shape histograms map identically
/// whatever the tile size.
fn tile_mapping(quantized: &[usize], w: usize, ys: (usize, usize), xs: (usize, usize), p: &ClaheParams) -> Vec<f64> {
    let mut counts = vec![0usize; p.bins];
    for y in ys.0..ys.1 {
        for &q in &quantized[y * w + xs.0..y * w + xs.1] {
            counts[q] += 1;
        }
    }
    let n = ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64;
    let limit = p.clip_limit / p.bins as f64;
    let mut freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut excess = 0.0;
    for f in &mut freq {
        if *f > limit {
            excess += *f - limit;
            *f = limit;
        }
    }
    let share = excess / p.bins as f64;
    let mut acc = 0.0;
    freq.iter()
        .map(|&f| {
            acc += f + share;
            acc.min(1.0)
        })
        .collect()
}

/// Tile boundaries along one axis of length `len` split into `tiles` parts.
fn bounds(len: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|t| t * len / tiles).collect()
}

/// Neighbouring tile indices and interpolation weight for a pixel center.
fn locate(pos: f64, centers: &[f64]) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= centers[last] {
        return (last, last, 0.0);
    }
    let t = centers.partition_point(|&c| c <= pos) - 1;
    (t, t + 1, (pos - centers[t]) / (centers[t + 1] - centers[t]))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// CLAHE of a single `h × w` slice with values in [0, 1].
pub fn clahe_slice(src: &[f64], h: usize, w: usize, p: &ClaheParams) -> Result<Vec<f64>> {
    p.validate()?;
    if src.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "slice of {} values is not {h}x{w}",
            src.len()
        )));
    }
    let (ty, tx) = (p.tiles_y.min(h), p.tiles_x.min(w));
    let quantized: Vec<usize> = src.iter().map(|&v| quantize(v, p.bins)).collect();
    let (yb, xb) = (bounds(h, ty), bounds(w, tx));
    let mut maps = Vec::with_capacity(ty * tx);
    for a in 0..ty {
        for b in 0..tx {
            maps.push(tile_mapping(&quantized, w, (yb[a], yb[a + 1]), (xb[b], xb[b + 1]), p));
        }
    }
    let cy: Vec<f64> = (0..ty).map(|t| (yb[t] + yb[t + 1]) as f64 / 2.0).collect();
    let cx: Vec<f64> = (0..tx).map(|t| (xb[t] + xb[t + 1]) as f64 / 2.0).collect();
    let xs: Vec<(usize, usize, f64)> = (0..w).map(|x| locate(x as f64 + 0.5, &cx)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, wy) = locate(y as f64 + 0.5, &cy);
        for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
            let q = quantized[y * w + x];
            let top = lerp(maps[y0 * tx + x0][q], maps[y0 * tx + x1][q], wx);
            let bottom = lerp(maps[y1 * tx + x0][q], maps[y1 * tx + x1][q], wx);
            out.push(lerp(top, bottom, wy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// CLAHE applied independently to every axial slice of a single-channel
/// volume.
pub fn clahe_volume<T: Scalar>(v: &Volume<T>, p: &ClaheParams) -> Result<Volume<T>> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!(
            "CLAHE expects a single-channel volume, got {}",
            v.shape()
        )));
    }
    p.validate()?;
    let [_, h, w] = v.extents();
    let mut out = vec![T::zero(); v.data().len()];
    out.par_chunks_mut(h * w)
        .zip(v.data().par_chunks(h * w))
        .try_for_each(|(dst, src)| -> Result<()> {
            let slice: Vec<f64> = src.iter().map(|x| x.as_f64()).collect();
            for (d, s) in dst.iter_mut().zip(clahe_slice(&slice, h, w, p)?) {
                *d = T::from_f64(s);
            }
            Ok(())
        })?;
    Volume::from_vec(v.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank-based global histogram equalization of quantized values.
    fn global_equalization(src: &[f64], bins: usize) -> Vec<f64> {
        let q: Vec<usize> = src.iter().map(|&v| ((v * bins as f64) as usize).min(bins - 1)).collect();
        q.iter()
            .map(|&b| q.iter().filter(|&&o| o <= b).count() as f64 / q.len() as f64)
            .collect()
    }

    #[test]
    fn constant_slice_stays_constant() {
        for &(h, w) in &[(16, 16), (13, 29), (5, 3)] {
            for &v in &[0.0, 0.37, 1.0] {
                let out = clahe_slice(&vec![v; h * w], h, w, &ClaheParams::default()).unwrap();
                assert!(out.iter().all(|&o| o == out[0]), "{h}x{w} at {v}");
            }
        }
    }

    #[test]
    fn single_unclipped_tile_is_global_equalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ClaheParams {
            tiles_y: 1,
            tiles_x: 1,
            clip_limit: 256.0,
            bins: 256,
        };
        for _ in 0..10 {
            let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
            let src: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>().powi(2)).collect();
            let out = clahe_slice(&src, h, w, &p).unwrap();
            let oracle = global_equalization(&src, 256);
            for (a, b) in out.iter().zip(&oracle) {
                assert!((a - b).abs() < 1.0 / 256.0);
            }
        }
    }

    #[test]
    fn output_within_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..48), rng.random_range(1..48));
            let p = ClaheParams {
                tiles_y: rng.random_range(1..10),
                tiles_x: rng.random_range(1..10),
                clip_limit: rng.random_range(1.0..6.0),
                bins: rng.random_range(2..300),
            };
            let src: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
            let out = clahe_slice(&src, h, w, &p).unwrap();
            assert!(out.iter().all(|&o| (0.0..=1.0).contains(&o)));
        }
    }

    #[test]
    fn changes_non_constant_volume_and_rejects_channels() {
        let v = Volume::<f32>::from_fn(Shape::new(1, 2, 16, 16).unwrap(), |_, z, y, x| {
            ((z + y * x) % 7) as f32 / 10.0
        })
        .unwrap();
        let out = clahe_volume(&v, &ClaheParams::default()).unwrap();
        assert_ne!(out, v);
        let two = Volume::<f32>::zeros(Shape::new(2, 1, 4, 4).unwrap()).unwrap();
        assert!(matches!(clahe_volume(&two, &ClaheParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_params() {
        for p in [
            ClaheParams { tiles_y: 0, ..Default::default() },
            ClaheParams { clip_limit: 0.5, ..Default::default() },
            ClaheParams { bins: 1, ..Default::default() },
        ] {
            assert!(matches!(p.validate(), Err(Error::Parameter(_))));
        }
    }
}
