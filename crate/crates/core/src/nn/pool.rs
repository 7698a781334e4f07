use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Volume};

/// Flat input index of the maximum of every pooling window, recorded by the
/// forward pass so the backward pass can route gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub window: usize,
    pub indices: Vec<usize>,
}

impl PoolIndices {
    pub fn output_shape(&self) -> Shape {
        let [d, h, w] = self.input_shape.extents();
        let p = self.window;
        self.input_shape.with_extents([d / p, h / p, w / p])
    }
}

/// Max pooling over disjoint `window^3` blocks with stride `window`.
///
/// Ties resolve to the first voxel in `(z, y, x)` scan order. An extent not
/// divisible by the window is a tiling error.
pub fn maxpool3d_forward<T: Scalar>(v: &Volume<T>, window: usize) -> Result<(Volume<T>, PoolIndices)> {
    if window == 0 {
        return Err(Error::Parameter("pool window must be at least 1".into()));
    }
    let [d, h, w] = v.extents();
    if [d, h, w].iter().any(|&e| e % window != 0) {
        return Err(Error::Tiling(format!(
            "max pooling with window {window} needs extents divisible by {window}, got {:?}",
            [d, h, w]
        )));
    }
    let p = window;
    let in_shape = v.shape();
    let out_shape = in_shape.with_extents([d / p, h / p, w / p]);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut indices = Vec::with_capacity(out_shape.len());
    let data = v.data();
    for c in 0..in_shape.channels {
        for z in 0..d / p {
            for y in 0..h / p {
                for x in 0..w / p {
                    let mut best_i = in_shape.index(c, z * p, y * p, x * p);
                    let mut best = data[best_i];
                    for i in 0..p {
                        for j in 0..p {
                            let row = in_shape.index(c, z * p + i, y * p + j, x * p);
                            for l in 0..p {
                                let val = data[row + l];
                                if val > best {
                                    best = val;
                                    best_i = row + l;
                                }
                            }
                        }
                    }
                    out.push(best);
                    indices.push(best_i);
                }
            }
        }
    }
    Ok((
        Volume::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: in_shape,
            window,
            indices,
        },
    ))
}

/// Scatters each output gradient to the recorded argmax of its window.
pub fn maxpool3d_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Volume<T>) -> Result<Volume<T>> {
    let out_shape = indices.output_shape();
    if grad_out.shape() != out_shape || indices.indices.len() != out_shape.len() {
        return Err(Error::Shape(format!(
            "pool gradient {} does not match recorded output {out_shape}",
            grad_out.shape()
        )));
    }
    let in_shape = indices.input_shape;
    let p = indices.window;
    let (ih, iw) = (in_shape.height, in_shape.width);
    let id = in_shape.depth;
    let mut grad_in = Volume::zeros(in_shape)?;
    let gi = grad_in.data_mut();
    let mut n = 0;
    for c in 0..out_shape.channels {
        for z in 0..out_shape.depth {
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    let src = indices.indices[n];
                    let sx = src % iw;
                    let sy = (src / iw) % ih;
                    let sz = (src / (iw * ih)) % id;
                    let sc = src / (iw * ih * id);
                    if sc != c || sz / p != z || sy / p != y || sx / p != x {
                        return Err(Error::Corruption(format!(
                            "pool index {src} lies outside window ({c}, {z}, {y}, {x})"
                        )));
                    }
                    gi[src] = gi[src] + grad_out.data()[n];
                    n += 1;
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_max() {
        let v = Volume::<f32>::from_vec(
            Shape::new(1, 2, 2, 2).unwrap(),
            (1..=8).map(|i| i as f32).collect(),
        )
        .unwrap();
        let (out, idx) = maxpool3d_forward(&v, 2).unwrap();
        assert_eq!(out.data(), &[8.0]);
        assert_eq!(idx.indices, vec![7]);
    }

    #[test]
    fn constant_volume_halves() {
        let v = Volume::<f32>::new(Shape::new(2, 4, 6, 8).unwrap(), 1.5).unwrap();
        let (out, _) = maxpool3d_forward(&v, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 2, 3, 4).unwrap());
        assert!(out.data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn odd_extent_is_tiling_error() {
        let v = Volume::<f32>::zeros(Shape::new(1, 4, 5, 4).unwrap()).unwrap();
        assert!(matches!(maxpool3d_forward(&v, 2), Err(Error::Tiling(_))));
    }

    #[test]
    fn ties_break_to_first_in_scan_order() {
        // Every window with two equal maxima at positions a < b, all others
        // lower; enumerate all placements.
        for a in 0..8 {
            for b in a + 1..8 {
                let mut vals = vec![0.0f64; 8];
                vals[a] = 1.0;
                vals[b] = 1.0;
                let v = Volume::from_vec(Shape::new(1, 2, 2, 2).unwrap(), vals).unwrap();
                let (_, idx) = maxpool3d_forward(&v, 2).unwrap();
                assert_eq!(idx.indices[0], a);
            }
        }
        // Constant window: scan order start.
        let v = Volume::<f64>::new(Shape::new(1, 2, 2, 2).unwrap(), 3.0).unwrap();
        assert_eq!(maxpool3d_forward(&v, 2).unwrap().1.indices[0], 0);
    }

    #[test]
    fn backward_routes_one_per_window_and_conserves_mass() {
        let v = Volume::<f64>::from_fn(Shape::new(2, 4, 4, 6).unwrap(), |c, z, y, x| {
            ((c * 97 + z * 31 + y * 17 + x * 7) % 23) as f64 + 0.01 * x as f64
        })
        .unwrap();
        let (out, idx) = maxpool3d_forward(&v, 2).unwrap();
        let ones = Volume::new(out.shape(), 1.0).unwrap();
        let gi = maxpool3d_backward(&idx, &ones).unwrap();
        assert_eq!(gi.sum(), ones.sum());
        assert_eq!(gi.data().iter().filter(|&&g| g == 1.0).count(), out.shape().len());

        let g = Volume::from_fn(out.shape(), |c, z, y, x| (c + z + y + x) as f64 * 0.5 - 1.0).unwrap();
        let gi = maxpool3d_backward(&idx, &g).unwrap();
        assert_eq!(gi.sum(), g.sum());
    }

    #[test]
    fn corrupted_index_is_detected() {
        let v = Volume::<f64>::from_fn(Shape::new(1, 4, 4, 4).unwrap(), |_, z, y, x| (z * 16 + y * 4 + x) as f64).unwrap();
        let (out, mut idx) = maxpool3d_forward(&v, 2).unwrap();
        idx.indices[0] = 63;
        let g = Volume::new(out.shape(), 1.0).unwrap();
        assert!(matches!(maxpool3d_backward(&idx, &g), Err(Error::Corruption(_))));
    }
}
