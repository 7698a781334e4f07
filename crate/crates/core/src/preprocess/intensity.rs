use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelVolume, Scalar, Volume};

/// Clamps to `[lo, hi]` and maps affinely onto [0, 1]. A volume that is
/// constant after clamping maps to all zeros.
pub fn normalize_intensity<T: Scalar>(v: &Volume<T>, lo: f64, hi: f64) -> Result<Volume<T>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!(
            "normalization window [{lo}, {hi}] is empty or not finite"
        )));
    }
    let clamped: Vec<f64> = v.data().iter().map(|x| x.as_f64().clamp(lo, hi)).collect();
    let first = clamped.first().copied().unwrap_or(lo);
    if clamped.iter().all(|&x| x == first) {
        return Volume::zeros(v.shape());
    }
    let span = hi - lo;
    let data = clamped.iter().map(|&x| T::from_f64((x - lo) / span)).collect();
    Volume::from_vec(v.shape(), data)
}

/// Binary mask of voxels with `lo <= value <= hi`.
pub fn threshold_roi<T: Scalar>(v: &Volume<T>, lo: f64, hi: f64) -> Result<LabelVolume> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!(
            "thresholding expects a single-channel volume, got {}",
            v.shape()
        )));
    }
    if lo > hi {
        return Err(Error::Parameter(format!("threshold window [{lo}, {hi}] is empty")));
    }
    let data = v
        .data()
        .iter()
        .map(|x| {
            let x = x.as_f64();
            u8::from(lo <= x && x <= hi)
        })
        .collect();
    LabelVolume::from_vec(v.extents(), data)
}

/// Zeroes every voxel (in every channel) where the mask is 0.
pub fn apply_mask<T: Scalar>(v: &Volume<T>, mask: &LabelVolume) -> Result<Volume<T>> {
    if v.extents() != mask.extents() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match volume {}",
            mask.extents(),
            v.shape()
        )));
    }
    let n = mask.len();
    let m = mask.data();
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if m[i % n] != 0 { x } else { T::zero() })
        .collect();
    Volume::from_vec(v.shape(), data)
}

fn draw(r: &mut impl Rng, (lo, hi): (f64, f64)) -> Result<f64> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::Parameter(format!("range ({lo}, {hi}) is invalid")));
    }
    Ok(if lo == hi { lo } else { r.random_range(lo..hi) })
}

/// Gray-value change `a·v + b` with `a` and `b` drawn from the given ranges,
/// re-clamped to [0, 1].
pub fn intensity_jitter<T: Scalar>(
    v: &Volume<T>,
    seed: u64,
    scale_range: (f64, f64),
    offset_range: (f64, f64),
) -> Result<Volume<T>> {
    let mut r = rng::stream(seed, 0);
    let a = draw(&mut r, scale_range)?;
    let b = draw(&mut r, offset_range)?;
    Ok(v.map(|x| T::from_f64((a * x.as_f64() + b).clamp(0.0, 1.0))))
}

pub(crate) fn draw_symmetric(r: &mut impl Rng, max: f64) -> Result<f64> {
    draw(r, (-max.abs(), max.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(vals: &[f64]) -> Volume<f64> {
        Volume::from_vec(Shape::new(1, 1, 1, vals.len()).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_intensity(&line(&[15.0, 25.0, 5.0]), 10.0, 20.0).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0, 0.0]);
        let c = normalize_intensity(&line(&[3.0, 3.0]), 0.0, 10.0).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let saturated = normalize_intensity(&line(&[30.0, 40.0]), 0.0, 10.0).unwrap();
        assert_eq!(saturated.data(), &[0.0, 0.0]);
        assert!(matches!(normalize_intensity(&line(&[1.0]), 2.0, 2.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn threshold_examples() {
        let v = line(&[0.3, 0.5, 0.9]);
        assert_eq!(threshold_roi(&v, 0.4, 0.8).unwrap().data(), &[0, 1, 0]);
        let all = threshold_roi(&v, 0.0, 1.0).unwrap();
        assert!(all.data().iter().all(|&m| m == 1));
        assert_eq!(apply_mask(&v, &all).unwrap(), v);
    }

    #[test]
    fn masked_fraction_matches_histogram() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..1000).map(|_| r.random()).collect();
        let v = line(&vals);
        let mask = threshold_roi(&v, 0.25, 0.6).unwrap();
        let outside = vals.iter().filter(|&&x| !(0.25..=0.6).contains(&x)).count();
        let zeroed = mask.data().iter().filter(|&&m| m == 0).count();
        assert_eq!(outside, zeroed);
        let masked = apply_mask(&v, &mask).unwrap();
        for (i, &m) in mask.data().iter().enumerate() {
            assert_eq!(masked.data()[i], if m == 1 { vals[i] } else { 0.0 });
        }
    }

    #[test]
    fn jitter_identity_and_range() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let v = line(&(0..100).map(|_| r.random()).collect::<Vec<_>>());
        assert_eq!(intensity_jitter(&v, 9, (1.0, 1.0), (0.0, 0.0)).unwrap(), v);
        let j = intensity_jitter(&v, 9, (0.5, 2.0), (-0.3, 0.3)).unwrap();
        assert!(j.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(j, intensity_jitter(&v, 9, (0.5, 2.0), (-0.3, 0.3)).unwrap());
    }
}
