//! Dense channel-major volumes and the shape algebra used by every layer.
//!
//! Data is stored flat in C order: channel, then depth, row and column, so the
//! innermost loops of the convolution kernels walk contiguous rows.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a [`Volume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element of a volume. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking and bitwise reproducibility runs).
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn extend_le_bytes(self, out: &mut Vec<u8>);
    /// Decodes one value from exactly `DTYPE.size_bytes()` little-endian bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Channel count plus the three spatial extents of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, depth: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Shape {
            channels,
            depth,
            height,
            width,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Single-channel shape with the given spatial extents.
    pub fn spatial(extents: [usize; 3]) -> Result<Self> {
        Shape::new(1, extents[0], extents[1], extents[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Size(format!("zero extent in {self}")));
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| Error::Size(format!("element count of {self} overflows")))
    }

    fn checked_len(&self) -> Option<usize> {
        self.channels
            .checked_mul(self.depth)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.channel_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one channel.
    pub fn channel_len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn with_channels(&self, channels: usize) -> Shape {
        Shape { channels, ..*self }
    }

    pub fn with_extents(&self, extents: [usize; 3]) -> Shape {
        Shape {
            channels: self.channels,
            depth: extents[0],
            height: extents[1],
            width: extents[2],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.depth + z) * self.height + y) * self.width + x
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.channels, self.depth, self.height, self.width
        )
    }
}

/// Offset of a centered crop along one axis. Odd margins put the extra voxel
/// at the far end.
#[inline]
pub fn crop_offset(source: usize, target: usize) -> usize {
    (source - target) / 2
}

/// Dense multi-channel 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;

impl<T: Scalar> Volume<T> {
    /// Volume of `shape` with every element set to `fill`.
    pub fn new(shape: Shape, fill: T) -> Result<Self> {
        shape.validate()?;
        Ok(Volume {
            shape,
            data: vec![fill; shape.len()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} elements supplied for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Volume { shape, data })
    }

    /// Builds a volume from a function of `(c, z, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for z in 0..shape.depth {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(c, z, y, x));
                    }
                }
            }
        }
        Ok(Volume { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn extents(&self) -> [usize; 3] {
        self.shape.extents()
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.channel_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(c, z, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Centered spatial sub-block with the extents of `target`. Channel counts
    /// must agree.
    pub fn crop_center(&self, target: Shape) -> Result<Self> {
        if target.channels != self.shape.channels {
            return Err(Error::Shape(format!(
                "crop from {} to {target}: channel counts differ",
                self.shape
            )));
        }
        let src = self.extents();
        let dst = target.extents();
        if src.iter().zip(&dst).any(|(s, d)| d > s) {
            return Err(Error::Shape(format!(
                "crop target {target} exceeds source {}",
                self.shape
            )));
        }
        if src == dst {
            return Ok(self.clone());
        }
        let origin = [
            crop_offset(src[0], dst[0]),
            crop_offset(src[1], dst[1]),
            crop_offset(src[2], dst[2]),
        ];
        self.extract(origin, dst)
    }

    /// Copies the block `[origin, origin + extents)` of every channel.
    pub fn extract(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        for a in 0..3 {
            if origin[a] + extents[a] > src[a] {
                return Err(Error::Shape(format!(
                    "block at {origin:?} of {extents:?} exceeds {}",
                    self.shape
                )));
            }
        }
        let shape = self.shape.with_extents(extents);
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for z in 0..extents[0] {
                for y in 0..extents[1] {
                    let start = self.shape.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    data.extend_from_slice(&self.data[start..start + extents[2]]);
                }
            }
        }
        Ok(Volume { shape, data })
    }

    /// Writes `block` into `self` at `origin` (all channels).
    pub fn insert(&mut self, origin: [usize; 3], block: &Volume<T>) -> Result<()> {
        let ext = block.extents();
        let dst = self.extents();
        if block.channels() != self.channels() || (0..3).any(|a| origin[a] + ext[a] > dst[a]) {
            return Err(Error::Shape(format!(
                "cannot place {} at {origin:?} inside {}",
                block.shape, self.shape
            )));
        }
        for c in 0..self.channels() {
            for z in 0..ext[0] {
                for y in 0..ext[1] {
                    let s = block.shape.index(c, z, y, 0);
                    let d = self.shape.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    self.data[d..d + ext[2]].copy_from_slice(&block.data[s..s + ext[2]]);
                }
            }
        }
        Ok(())
    }

    /// Zero-pads to `extents`, placing `self` where [`crop_center`] would take
    /// it back from. This is the adjoint of the centered crop.
    ///
    /// [`crop_center`]: Volume::crop_center
    pub fn pad_center(&self, extents: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        if src.iter().zip(&extents).any(|(s, d)| s > d) {
            return Err(Error::Shape(format!(
                "pad target {extents:?} smaller than {}",
                self.shape
            )));
        }
        let origin = [
            crop_offset(extents[0], src[0]),
            crop_offset(extents[1], src[1]),
            crop_offset(extents[2], src[2]),
        ];
        let mut out = Volume::zeros(self.shape.with_extents(extents))?;
        out.insert(origin, self)?;
        Ok(out)
    }

    /// Zero-pads by `before` voxels on the low side and `after` on the high side
    /// of every spatial axis.
    pub fn pad(&self, before: [usize; 3], after: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        let ext = [
            src[0] + before[0] + after[0],
            src[1] + before[1] + after[1],
            src[2] + before[2] + after[2],
        ];
        let mut out = Volume::zeros(self.shape.with_extents(ext))?;
        out.insert(before, self)?;
        Ok(out)
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(a: &Volume<T>, b: &Volume<T>) -> Result<Self> {
        if a.extents() != b.extents() {
            return Err(Error::Shape(format!(
                "concat of {} and {}: spatial extents differ",
                a.shape, b.shape
            )));
        }
        let shape = a.shape.with_channels(a.channels() + b.channels());
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Volume { shape, data })
    }

    /// Splits channels at `first` (adjoint of [`Volume::concat_channels`]).
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        if first == 0 || first >= self.channels() {
            return Err(Error::Shape(format!(
                "cannot split {} at channel {first}",
                self.shape
            )));
        }
        let n = first * self.shape.channel_len();
        Ok((
            Volume {
                shape: self.shape.with_channels(first),
                data: self.data[..n].to_vec(),
            },
            Volume {
                shape: self.shape.with_channels(self.channels() - first),
                data: self.data[n..].to_vec(),
            },
        ))
    }

    /// Elementwise `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Volume<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add of {} and {}",
                self.shape, other.shape
            )));
        }
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + alpha * s;
        }
        Ok(())
    }
}

/// Integer class-ID grid aligned to a volume's spatial extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn zeros(extents: [usize; 3]) -> Result<Self> {
        let shape = Shape::spatial(extents)?;
        Ok(LabelVolume {
            shape,
            data: vec![0; shape.len()],
        })
    }

    pub fn from_vec(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let shape = Shape::spatial(extents)?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} labels supplied for extents {extents:?}",
                data.len()
            )));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn extents(&self) -> [usize; 3] {
        self.shape.extents()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(0, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u8) {
        let i = self.shape.index(0, z, y, x);
        self.data[i] = v;
    }

    /// Checks every label is below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::Label(format!(
                "label {l} outside 0..{num_classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Voxel count per class for classes `0..num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes.max(self.max_label() as usize + 1)];
        for &l in &self.data {
            counts[l as usize] += 1;
        }
        counts.truncate(num_classes.max(1));
        counts
    }

    pub fn crop_center(&self, extents: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        if src.iter().zip(&extents).any(|(s, d)| d > s) {
            return Err(Error::Shape(format!(
                "crop target {extents:?} exceeds source {src:?}"
            )));
        }
        let origin = [
            crop_offset(src[0], extents[0]),
            crop_offset(src[1], extents[1]),
            crop_offset(src[2], extents[2]),
        ];
        self.extract(origin, extents)
    }

    pub fn extract(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        if (0..3).any(|a| origin[a] + extents[a] > src[a]) {
            return Err(Error::Shape(format!(
                "block at {origin:?} of {extents:?} exceeds {src:?}"
            )));
        }
        let shape = Shape::spatial(extents)?;
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                let s = self.shape.index(0, origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[s..s + extents[2]]);
            }
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn pad(&self, before: [usize; 3], after: [usize; 3]) -> Result<Self> {
        let src = self.extents();
        let ext = [
            src[0] + before[0] + after[0],
            src[1] + before[1] + after[1],
            src[2] + before[2] + after[2],
        ];
        let mut out = LabelVolume::zeros(ext)?;
        for z in 0..src[0] {
            for y in 0..src[1] {
                let s = self.shape.index(0, z, y, 0);
                let d = out.shape.index(0, before[0] + z, before[1] + y, before[2]);
                out.data[d..d + src[2]].copy_from_slice(&self.data[s..s + src[2]]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(c: usize, d: usize, h: usize, w: usize) -> Shape {
        Shape::new(c, d, h, w).unwrap()
    }

    #[test]
    fn create_fills() {
        let v = Volume::<f32>::new(shape(1, 2, 2, 2), 0.0).unwrap();
        assert_eq!(v.data(), &[0.0; 8]);
        let v = Volume::<f32>::new(shape(2, 1, 1, 1), 3.5).unwrap();
        assert_eq!(v.data(), &[3.5, 3.5]);
    }

    #[test]
    fn zero_extent_is_size_error() {
        assert!(matches!(Shape::new(1, 0, 2, 2), Err(Error::Size(_))));
        assert!(matches!(
            Shape::new(usize::MAX, 2, 2, 2),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn crop_identity_and_symmetric_margin() {
        let v = Volume::<f64>::from_fn(shape(1, 6, 6, 6), |_, z, y, x| (z * 36 + y * 6 + x) as f64)
            .unwrap();
        assert_eq!(v.crop_center(v.shape()).unwrap(), v);

        let row = Volume::<f64>::from_vec(shape(1, 1, 1, 6), (0..6).map(|i| i as f64).collect())
            .unwrap();
        let c = row.crop_center(shape(1, 1, 1, 4)).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn odd_margin_uses_floor_offset() {
        // Enumerate every offset that keeps the target inside the source and
        // confirm the chosen one is the floor of the centered position.
        for src in 1..12usize {
            for dst in 1..=src {
                let admissible: Vec<usize> = (0..=src - dst).collect();
                let centered = admissible
                    .iter()
                    .copied()
                    .min_by_key(|&o| {
                        let left = o;
                        let right = src - dst - o;
                        (left.abs_diff(right), o)
                    })
                    .unwrap();
                assert_eq!(crop_offset(src, dst), centered, "src {src} dst {dst}");
            }
        }
        let row = Volume::<f64>::from_vec(shape(1, 1, 1, 5), (0..5).map(|i| i as f64).collect())
            .unwrap();
        let c = row.crop_center(shape(1, 1, 1, 4)).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn crop_larger_target_fails() {
        let v = Volume::<f32>::zeros(shape(1, 4, 4, 4)).unwrap();
        assert!(matches!(
            v.crop_center(shape(1, 5, 4, 4)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            v.crop_center(shape(2, 4, 4, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn concat_layout() {
        let a = Volume::<f32>::from_fn(shape(2, 4, 4, 4), |c, z, y, x| (c + z + y + x) as f32 + 1.0)
            .unwrap();
        let b = Volume::<f32>::zeros(a.shape()).unwrap();
        let cat = Volume::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), shape(4, 4, 4, 4));
        assert_eq!(&cat.data()[..a.data().len()], a.data());
        assert!(cat.data()[a.data().len()..].iter().all(|&v| v == 0.0));

        let c = Volume::<f32>::zeros(shape(2, 5, 5, 5)).unwrap();
        assert!(matches!(
            Volume::concat_channels(&a, &c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pad_center_is_crop_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let small = Volume::<f64>::from_fn(shape(2, 3, 4, 5), |_, _, _, _| rng.random()).unwrap();
        let big_ext = [6, 7, 8];
        let y = Volume::<f64>::from_fn(shape(2, 6, 7, 8), |_, _, _, _| rng.random()).unwrap();
        // <crop(y), s> == <y, pad(s)>
        let lhs: f64 = y
            .crop_center(small.shape())
            .unwrap()
            .data()
            .iter()
            .zip(small.data())
            .map(|(a, b)| a * b)
            .sum();
        let padded = small.pad_center(big_ext).unwrap();
        let rhs: f64 = y.data().iter().zip(padded.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn random_index_round_trip() {
        let s = shape(3, 7, 5, 9);
        let mut v = Volume::<f32>::zeros(s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut written = Vec::new();
        for _ in 0..1000 {
            let idx = (
                rng.random_range(0..3),
                rng.random_range(0..7),
                rng.random_range(0..5),
                rng.random_range(0..9),
            );
            let val: f32 = rng.random();
            v.set(idx.0, idx.1, idx.2, idx.3, val);
            written.push((idx, val));
            assert_eq!(v.get(idx.0, idx.1, idx.2, idx.3), val);
        }
        // Last write wins for repeated indices.
        let mut last = std::collections::HashMap::new();
        for (idx, val) in written {
            last.insert(idx, val);
        }
        for ((c, z, y, x), val) in last {
            assert_eq!(v.get(c, z, y, x), val);
            assert_eq!(v.data()[((c * 7 + z) * 5 + y) * 9 + x], val);
        }
    }

    proptest! {
        #[test]
        fn concat_then_crop_is_lossless(c1 in 1usize..3, c2 in 1usize..3, d in 1usize..5, h in 1usize..5, w in 1usize..5, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Volume::<f32>::from_fn(shape(c1, d, h, w), |_, _, _, _| rng.random()).unwrap();
            let b = Volume::<f32>::from_fn(shape(c2, d, h, w), |_, _, _, _| rng.random()).unwrap();
            let cat = Volume::concat_channels(&a, &b).unwrap();
            let same = cat.crop_center(cat.shape()).unwrap();
            let (ra, rb) = same.split_channels(c1).unwrap();
            prop_assert_eq!(ra, a);
            prop_assert_eq!(rb, b);
        }

        #[test]
        fn crop_is_idempotent(d in 1usize..9, h in 1usize..9, w in 1usize..9, td in 1usize..9, th in 1usize..9, tw in 1usize..9) {
            let (td, th, tw) = (1 + (td - 1) % d, 1 + (th - 1) % h, 1 + (tw - 1) % w);
            let v = Volume::<f32>::from_fn(shape(2, d, h, w), |c, z, y, x| (c * 1000 + z * 100 + y * 10 + x) as f32).unwrap();
            let t = shape(2, td, th, tw);
            let once = v.crop_center(t).unwrap();
            prop_assert_eq!(once.crop_center(t).unwrap(), once);
        }
    }
}
