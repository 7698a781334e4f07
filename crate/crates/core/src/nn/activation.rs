use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Volume};

pub fn relu_forward<T: Scalar>(v: &Volume<T>) -> Volume<T> {
    v.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient gate of ReLU. `v` may be either the pre-activation or the ReLU
/// output: both are positive at exactly the same positions. The subgradient
/// at zero is zero.
pub fn relu_backward<T: Scalar>(v: &Volume<T>, grad_out: &Volume<T>) -> Result<Volume<T>> {
    if v.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu gradient {} does not match activation {}",
            grad_out.shape(),
            v.shape()
        )));
    }
    let data = v
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Volume::from_vec(v.shape(), data)
}

/// Per-element keep flags of an inverted-dropout layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub p_drop: f64,
    pub seed: u64,
    /// Factor applied to kept elements: `1 / (1 - p_drop)` in training, 1 in
    /// evaluation.
    pub scale: f64,
}

impl DropoutMask {
    /// Mask for `len` elements. Element `i` is kept when the counter-based
    /// uniform draw for `(seed, i)` is at least `p_drop`.
    pub fn generate(len: usize, p_drop: f64, seed: u64) -> Result<Self> {
        check_p(p_drop)?;
        let keep = (0..len as u64).map(|i| rng::uniform(seed, i) >= p_drop).collect();
        Ok(DropoutMask {
            keep,
            p_drop,
            seed,
            scale: 1.0 / (1.0 - p_drop),
        })
    }

    pub fn all_keep(len: usize, p_drop: f64, seed: u64) -> Self {
        DropoutMask {
            keep: vec![true; len],
            p_drop,
            seed,
            scale: 1.0,
        }
    }

    pub fn keep_rate(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len().max(1) as f64
    }
}

fn check_p(p_drop: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Parameter(format!(
            "dropout probability {p_drop} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted dropout: training scales kept elements by `1 / (1 - p_drop)`;
/// evaluation is the identity.
pub fn dropout_forward<T: Scalar>(
    v: &Volume<T>,
    p_drop: f64,
    seed: u64,
    training: bool,
) -> Result<(Volume<T>, DropoutMask)> {
    check_p(p_drop)?;
    if !training || p_drop == 0.0 {
        return Ok((v.clone(), DropoutMask::all_keep(v.data().len(), p_drop, seed)));
    }
    let mask = DropoutMask::generate(v.data().len(), p_drop, seed)?;
    let scale = T::from_f64(mask.scale);
    let data = v
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&x, &k)| if k { x * scale } else { T::zero() })
        .collect();
    Ok((Volume::from_vec(v.shape(), data)?, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask, grad_out: &Volume<T>) -> Result<Volume<T>> {
    if mask.keep.len() != grad_out.data().len() {
        return Err(Error::Shape(format!(
            "dropout mask of {} elements for gradient {}",
            mask.keep.len(),
            grad_out.shape()
        )));
    }
    if mask.scale == 1.0 && mask.keep.iter().all(|&k| k) {
        return Ok(grad_out.clone());
    }
    let scale = T::from_f64(mask.scale);
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&g, &k)| if k { g * scale } else { T::zero() })
        .collect();
    Volume::from_vec(grad_out.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn row(vals: &[f64]) -> Volume<f64> {
        Volume::from_vec(Shape::new(1, 1, 1, vals.len()).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_gate() {
        assert_eq!(relu_forward(&row(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&row(&[-1.0, 2.0]), &row(&[5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
        let g0 = relu_backward(&row(&[0.0]), &row(&[3.0])).unwrap();
        assert_eq!(g0.data(), &[0.0]);
    }

    #[test]
    fn dropout_identities() {
        let v = row(&[1.0, -2.0, 3.0, 4.0]);
        for training in [true, false] {
            let (out, mask) = dropout_forward(&v, 0.0, 9, training).unwrap();
            assert_eq!(out, v);
            assert!(mask.keep.iter().all(|&k| k));
        }
        let (out, mask) = dropout_forward(&v, 0.3, 9, false).unwrap();
        assert_eq!(out, v);
        assert!(mask.keep.iter().all(|&k| k));
        assert_eq!(dropout_backward(&mask, &v).unwrap(), v);
    }

    #[test]
    fn dropout_rejects_p_one() {
        assert!(matches!(
            dropout_forward(&row(&[1.0]), 1.0, 0, true),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_keep_rate_monte_carlo() {
        let mask = DropoutMask::generate(1_000_000, 0.3, 1234).unwrap();
        assert!((mask.keep_rate() - 0.7).abs() < 0.005, "{}", mask.keep_rate());
    }

    #[test]
    fn dropout_mask_is_reproducible_and_scaled() {
        let v = Volume::new(Shape::new(1, 4, 4, 4).unwrap(), 1.0f64).unwrap();
        let (a, ma) = dropout_forward(&v, 0.5, 77, true).unwrap();
        let (b, mb) = dropout_forward(&v, 0.5, 77, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.data().iter().all(|&x| x == 0.0 || x == 2.0));
        let g = dropout_backward(&ma, &v).unwrap();
        assert_eq!(g, a);
    }
}
