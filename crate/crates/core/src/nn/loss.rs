use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Scalar, Volume};

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Logit gaps below this give probability exactly 0 (`e^-30 ≈ 9e-14`), so
/// near-certain voxels do not feed subnormal values into backpropagation.
pub const SOFTMAX_CUTOFF: f64 = -30.0;

/// Softmax across channels at every voxel, with per-voxel max subtraction.
pub fn softmax_voxelwise<T: Scalar>(logits: &Volume<T>) -> Result<Volume<T>> {
    let c = logits.channels();
    if c < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least two channels, got {}",
            logits.shape()
        )));
    }
    let n = logits.shape().channel_len();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for v in 0..n {
        let mut max = src[v];
        for ch in 1..c {
            max = max.max(src[ch * n + v]);
        }
        let mut sum = T::zero();
        let cutoff = T::from_f64(SOFTMAX_CUTOFF);
        for ch in 0..c {
            let d = src[ch * n + v] - max;
            let e = if d < cutoff { T::zero() } else { d.exp() };
            out[ch * n + v] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            out[ch * n + v] = out[ch * n + v] / sum;
        }
    }
    Volume::from_vec(logits.shape(), out)
}

/// Weighted cross-entropy of softmax probabilities against integer labels.
///
/// `loss = Σ w(x)·(−ln p_label(x)) / Σ w(x)`; the returned gradient is taken
/// with respect to the logits that produced `probs`:
/// `w(x)·(p − onehot) / Σ w`.
pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Volume<T>,
    labels: &LabelVolume,
    weights: &Volume<T>,
) -> Result<(T, Volume<T>)> {
    let c = probs.channels();
    if probs.extents() != labels.extents() || weights.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "probabilities {}, labels {} and weights {} are not aligned",
            probs.shape(),
            labels.shape(),
            weights.shape()
        )));
    }
    labels.validate_classes(c)?;
    let n = labels.len();
    let w = weights.data();
    let total_w: f64 = w.iter().map(|v| v.as_f64()).sum();
    if !(total_w > 0.0) || !total_w.is_finite() {
        return Err(Error::Parameter(format!(
            "loss weights must have a positive finite sum, got {total_w}"
        )));
    }
    let p = probs.data();
    let mut loss = 0.0f64;
    let mut grad = p.to_vec();
    let norm = T::from_f64(1.0 / total_w);
    for (v, &label) in labels.data().iter().enumerate() {
        let l = label as usize;
        let pv = p[l * n + v].as_f64().max(PROB_FLOOR);
        loss += w[v].as_f64() * -pv.ln();
        grad[l * n + v] = grad[l * n + v] - T::one();
        let scale = w[v] * norm;
        for ch in 0..c {
            grad[ch * n + v] = grad[ch * n + v] * scale;
        }
    }
    Ok((
        T::from_f64(loss / total_w),
        Volume::from_vec(probs.shape(), grad)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn voxel(vals: &[f64]) -> Volume<f64> {
        Volume::from_vec(Shape::new(vals.len(), 1, 1, 1).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_voxelwise(&voxel(&[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_voxelwise(&voxel(&[1000.0, 1000.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_voxelwise(&voxel(&[0.0, 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Volume::<f32>::from_fn(Shape::new(5, 3, 4, 5).unwrap(), |_, _, _, _| {
            rng.random_range(-50.0..50.0)
        })
        .unwrap();
        let p = softmax_voxelwise(&logits).unwrap();
        let n = p.shape().channel_len();
        for v in 0..n {
            let s: f32 = (0..5).map(|c| p.data()[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let probs = Volume::<f64>::from_vec(Shape::new(2, 1, 1, 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = LabelVolume::from_vec([1, 1, 2], vec![0, 1]).unwrap();
        let w = Volume::new(labels.shape(), 1.0).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_four_classes_is_ln4() {
        let probs = Volume::<f64>::new(Shape::new(4, 2, 2, 2).unwrap(), 0.25).unwrap();
        let labels = LabelVolume::from_vec([2, 2, 2], vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let w = Volume::new(labels.shape(), 1.0).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn weight_scale_invariance_and_unweighted_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Volume::<f64>::from_fn(Shape::new(3, 3, 3, 3).unwrap(), |_, _, _, _| rng.random_range(-2.0..2.0)).unwrap();
        let probs = softmax_voxelwise(&logits).unwrap();
        let labels = LabelVolume::from_vec([3, 3, 3], (0..27).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let w = Volume::from_fn(labels.shape(), |_, _, _, _| rng.random_range(0.1..3.0)).unwrap();
        let (l1, g1) = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        let (l2, g2) = weighted_cross_entropy(&probs, &labels, &w.map(|x| 2.0 * x)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let ones = Volume::new(labels.shape(), 1.0).unwrap();
        let (lu, _) = weighted_cross_entropy(&probs, &labels, &ones).unwrap();
        let n = 27;
        let mean: f64 = labels
            .data()
            .iter()
            .enumerate()
            .map(|(v, &l)| -probs.data()[l as usize * n + v].ln())
            .sum::<f64>()
            / n as f64;
        assert!((lu - mean).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let probs = Volume::<f64>::new(Shape::new(2, 1, 1, 1).unwrap(), 0.5).unwrap();
        let labels = LabelVolume::from_vec([1, 1, 1], vec![2]).unwrap();
        let w = Volume::new(labels.shape(), 1.0).unwrap();
        assert!(matches!(
            weighted_cross_entropy(&probs, &labels, &w),
            Err(Error::Label(_))
        ));
    }
}
