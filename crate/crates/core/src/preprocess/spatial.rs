use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelVolume, Scalar, Volume};

use super::intensity::draw_symmetric;

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear sample of one channel at a continuous position; neighbours
/// outside the grid contribute 0.
fn sample_trilinear<T: Scalar>(ch: &[T], [d, h, w]: [usize; 3], [z, y, x]: [f64; 3]) -> f64 {
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    let get = |zz: i64, yy: i64, xx: i64| -> f64 {
        if zz < 0 || yy < 0 || xx < 0 || zz >= d as i64 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            ch[(zz as usize * h + yy as usize) * w + xx as usize].as_f64()
        }
    };
    let row = |zz: i64, yy: i64| lerp(get(zz, yy, x0), get(zz, yy, x0 + 1), fx);
    let plane = |zz: i64| lerp(row(zz, y0), row(zz, y0 + 1), fy);
    lerp(plane(z0), plane(z0 + 1), fz)
}

/// Nearest-neighbour sample, clamped to the grid so only existing labels
/// can appear.
fn sample_nearest(l: &LabelVolume, [z, y, x]: [f64; 3]) -> u8 {
    let [d, h, w] = l.extents();
    let idx = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    l.get(idx(z, d), idx(y, h), idx(x, w))
}

/// Resamples every channel at `map(z, y, x)` for each output voxel.
fn warp_image<T: Scalar>(
    v: &Volume<T>,
    out_ext: [usize; 3],
    map: impl Fn(usize, usize, usize) -> [f64; 3] + Sync,
) -> Result<Volume<T>> {
    let shape = v.shape().with_extents(out_ext);
    shape.validate()?;
    let [_, oh, ow] = out_ext;
    let src_ext = v.extents();
    let mut out = vec![T::zero(); shape.len()];
    let plane = oh * ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(cz, dst)| {
        let (c, z) = (cz / out_ext[0], cz % out_ext[0]);
        let ch = v.channel(c);
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = T::from_f64(sample_trilinear(ch, src_ext, map(z, y, x)));
            }
        }
    });
    Volume::from_vec(shape, out)
}

fn warp_labels(
    l: &LabelVolume,
    out_ext: [usize; 3],
    map: impl Fn(usize, usize, usize) -> [f64; 3],
) -> Result<LabelVolume> {
    let [od, oh, ow] = out_ext;
    let mut data = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                data.push(sample_nearest(l, map(z, y, x)));
            }
        }
    }
    LabelVolume::from_vec(out_ext, data)
}

/// Corner-aligned source coordinate of output index `i`.
fn corner_aligned(src: usize, dst: usize, i: usize) -> f64 {
    if src == 1 || dst == 1 {
        0.0
    } else {
        (i * (src - 1)) as f64 / (dst - 1) as f64
    }
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Parameter(format!("resize target {target:?} has a zero extent")));
    }
    Ok(())
}

/// Trilinear resize with corner-aligned sampling.
pub fn resize_volume<T: Scalar>(v: &Volume<T>, target: [usize; 3]) -> Result<Volume<T>> {
    check_target(target)?;
    if target == v.extents() {
        return Ok(v.clone());
    }
    let s = v.extents();
    warp_image(v, target, |z, y, x| {
        [
            corner_aligned(s[0], target[0], z),
            corner_aligned(s[1], target[1], y),
            corner_aligned(s[2], target[2], x),
        ]
    })
}

/// Nearest-neighbour resize for label volumes.
pub fn resize_labels(l: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    check_target(target)?;
    if target == l.extents() {
        return Ok(l.clone());
    }
    let s = l.extents();
    warp_labels(l, target, |z, y, x| {
        [
            corner_aligned(s[0], target[0], z),
            corner_aligned(s[1], target[1], y),
            corner_aligned(s[2], target[2], x),
        ]
    })
}

/// Displacements (voxels, `[dz, dy, dx]`) on a 3×3×3 control grid spanning
/// the volume corner to corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformField {
    pub sigma: f64,
    pub seed: u64,
    pub control: Vec<[f64; 3]>,
}

impl DeformField {
    pub fn generate(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::Parameter(format!("displacement sigma {sigma} is negative")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| {
            Error::Parameter(format!("displacement sigma {sigma}: {e}"))
        })?;
        let mut r = rng::stream(seed, 0);
        let control = (0..27)
            .map(|_| {
                [
                    normal.sample(&mut r),
                    normal.sample(&mut r),
                    normal.sample(&mut r),
                ]
            })
            .collect();
        Ok(DeformField { sigma, seed, control })
    }

    /// Every control vector equal to `shift`.
    pub fn translation(shift: [f64; 3]) -> Self {
        DeformField {
            sigma: 0.0,
            seed: 0,
            control: vec![shift; 27],
        }
    }

    /// Dense displacement at voxel `(z, y, x)` of a volume with `extents`.
    pub fn displacement(&self, extents: [usize; 3], pos: [usize; 3]) -> [f64; 3] {
        let mut g0 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let g = if extents[a] > 1 {
                pos[a] as f64 * 2.0 / (extents[a] - 1) as f64
            } else {
                0.0
            };
            g0[a] = (g.floor() as usize).min(1);
            f[a] = g - g0[a] as f64;
        }
        let node = |i: usize, j: usize, k: usize| self.control[(i * 3 + j) * 3 + k];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let row = |i: usize, j: usize| lerp(node(i, j, g0[2])[c], node(i, j, g0[2] + 1)[c], f[2]);
            let plane = |i: usize| lerp(row(i, g0[1]), row(i, g0[1] + 1), f[1]);
            *o = lerp(plane(g0[0]), plane(g0[0] + 1), f[0]);
        }
        out
    }

    fn source(&self, extents: [usize; 3], z: usize, y: usize, x: usize) -> [f64; 3] {
        let d = self.displacement(extents, [z, y, x]);
        [z as f64 + d[0], y as f64 + d[1], x as f64 + d[2]]
    }
}

pub fn deform_image<T: Scalar>(v: &Volume<T>, field: &DeformField) -> Result<Volume<T>> {
    check_field(field)?;
    let e = v.extents();
    warp_image(v, e, |z, y, x| field.source(e, z, y, x))
}

pub fn deform_labels(l: &LabelVolume, field: &DeformField) -> Result<LabelVolume> {
    check_field(field)?;
    let e = l.extents();
    warp_labels(l, e, |z, y, x| field.source(e, z, y, x))
}

fn check_field(field: &DeformField) -> Result<()> {
    if field.control.len() != 27 || field.control.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("deformation field needs 27 finite control vectors".into()));
    }
    Ok(())
}

fn check_aligned<T: Scalar>(v: &Volume<T>, l: &LabelVolume) -> Result<()> {
    if v.extents() != l.extents() {
        return Err(Error::Shape(format!(
            "image {} and labels {:?} are not aligned",
            v.shape(),
            l.extents()
        )));
    }
    Ok(())
}

/// Elastic deformation: trilinear for the image (outside samples read 0),
/// nearest-neighbour for labels.
pub fn elastic_deform<T: Scalar>(
    v: &Volume<T>,
    labels: &LabelVolume,
    field: &DeformField,
) -> Result<(Volume<T>, LabelVolume)> {
    check_aligned(v, labels)?;
    Ok((deform_image(v, field)?, deform_labels(labels, field)?))
}

/// Rotation about the z axis (degrees) followed by a shift (voxels,
/// `[dz, dy, dx]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub shift: [f64; 3],
}

impl AffineParams {
    pub fn draw(seed: u64, max_shift: f64, max_rotate: f64) -> Result<Self> {
        let mut r = rng::stream(seed, 0);
        let rotate_deg = draw_symmetric(&mut r, max_rotate)?;
        let mut shift = [0.0; 3];
        for s in &mut shift {
            *s = draw_symmetric(&mut r, max_shift)?;
        }
        Ok(AffineParams { rotate_deg, shift })
    }

    fn source(&self, [_, h, w]: [usize; 3], z: usize, y: usize, x: usize) -> [f64; 3] {
        let (sin, cos) = self.rotate_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        [
            snap(z as f64 - self.shift[0]),
            snap(cy - dx * sin + dy * cos - self.shift[1]),
            snap(cx + dx * cos + dy * sin - self.shift[2]),
        ]
    }
}

pub fn affine_image<T: Scalar>(v: &Volume<T>, a: &AffineParams) -> Result<Volume<T>> {
    let e = v.extents();
    warp_image(v, e, |z, y, x| a.source(e, z, y, x))
}

pub fn affine_labels(l: &LabelVolume, a: &AffineParams) -> Result<LabelVolume> {
    let e = l.extents();
    warp_labels(l, e, |z, y, x| a.source(e, z, y, x))
}

/// Random rotation in `±max_rotate` degrees about z and shift in
/// `±max_shift` voxels per axis.
pub fn random_affine<T: Scalar>(
    v: &Volume<T>,
    labels: &LabelVolume,
    seed: u64,
    max_shift: f64,
    max_rotate: f64,
) -> Result<(Volume<T>, LabelVolume)> {
    check_aligned(v, labels)?;
    let a = AffineParams::draw(seed, max_shift, max_rotate)?;
    Ok((affine_image(v, &a)?, affine_labels(labels, &a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Volume<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _, _| r.random()).unwrap()
    }

    fn random_labels(ext: [usize; 3], classes: &[u8], seed: u64) -> LabelVolume {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = ext.iter().product();
        LabelVolume::from_vec(ext, (0..n).map(|_| classes[r.random_range(0..classes.len())]).collect()).unwrap()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let v = random(Shape::new(2, 5, 6, 7).unwrap(), 1);
        assert_eq!(resize_volume(&v, [5, 6, 7]).unwrap(), v);
    }

    #[test]
    fn constant_resizes_to_constant() {
        let v = Volume::<f64>::new(Shape::new(1, 4, 5, 6).unwrap(), 0.3).unwrap();
        let r = resize_volume(&v, [9, 2, 13]).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn ramp_doubles_analytically() {
        let v = Volume::<f64>::from_fn(Shape::new(1, 3, 4, 8).unwrap(), |_, _, _, x| x as f64 / 7.0).unwrap();
        let r = resize_volume(&v, [6, 8, 16]).unwrap();
        for z in 0..6 {
            for y in 0..8 {
                for x in 0..16 {
                    assert!((r.get(0, z, y, x) - x as f64 / 15.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn label_resize_keeps_ids() {
        let l = random_labels([4, 4, 4], &[0, 3, 5], 2);
        let r = resize_labels(&l, [7, 3, 9]).unwrap();
        assert!(r.data().iter().all(|v| [0, 3, 5].contains(v)));
        assert_eq!(resize_labels(&l, [4, 4, 4]).unwrap(), l);
    }

    #[test]
    fn zero_sigma_deformation_is_identity() {
        let v = random(Shape::new(1, 6, 7, 8).unwrap(), 3);
        let l = random_labels([6, 7, 8], &[0, 1, 2], 3);
        let f = DeformField::generate(0.0, 17).unwrap();
        let (dv, dl) = elastic_deform(&v, &l, &f).unwrap();
        assert_eq!(dv, v);
        assert_eq!(dl, l);
    }

    #[test]
    fn translation_shifts_ramp_one_voxel() {
        let v = Volume::<f64>::from_fn(Shape::new(1, 3, 4, 10).unwrap(), |_, z, y, x| {
            (x + 3 * y + 20 * z) as f64
        })
        .unwrap();
        let out = deform_image(&v, &DeformField::translation([0.0, 0.0, 1.0])).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..9 {
                    assert_eq!(out.get(0, z, y, x), v.get(0, z, y, x + 1));
                }
                assert_eq!(out.get(0, z, y, 9), 0.0);
            }
        }
    }

    #[test]
    fn field_is_seed_deterministic() {
        assert_eq!(DeformField::generate(2.0, 5).unwrap(), DeformField::generate(2.0, 5).unwrap());
        assert_ne!(DeformField::generate(2.0, 5).unwrap(), DeformField::generate(2.0, 6).unwrap());
        assert!(matches!(DeformField::generate(-1.0, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_range_affine_is_identity() {
        let v = random(Shape::new(2, 4, 5, 6).unwrap(), 4);
        let l = random_labels([4, 5, 6], &[0, 1], 4);
        let (av, al) = random_affine(&v, &l, 8, 0.0, 0.0).unwrap();
        assert_eq!(av, v);
        assert_eq!(al, l);
    }

    #[test]
    fn quarter_turn_permutes_slice() {
        let slice = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let v = Volume::<f64>::from_vec(Shape::new(1, 1, 3, 3).unwrap(), slice.to_vec()).unwrap();
        let a = AffineParams {
            rotate_deg: 90.0,
            shift: [0.0; 3],
        };
        let out = affine_image(&v, &a).unwrap();
        // out[y][x] = in[2 - x][y]
        assert_eq!(out.data(), &[7.0, 4.0, 1.0, 8.0, 5.0, 2.0, 9.0, 6.0, 3.0]);
        let l = LabelVolume::from_vec([1, 3, 3], vec![1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(affine_labels(&l, &a).unwrap().data(), &[7, 4, 1, 8, 5, 2, 9, 6, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn warped_labels_only_contain_source_ids(seed in 0u64..1000, sigma in 0.0f64..4.0, rot in 0.0f64..180.0) {
            let l = random_labels([5, 6, 7], &[0, 2, 6], seed);
            let dl = deform_labels(&l, &DeformField::generate(sigma, seed).unwrap()).unwrap();
            prop_assert!(dl.data().iter().all(|v| [0, 2, 6].contains(v)));
            let a = AffineParams::draw(seed, 3.0, rot).unwrap();
            let al = affine_labels(&l, &a).unwrap();
            prop_assert!(al.data().iter().all(|v| [0, 2, 6].contains(v)));
        }
    }
}
