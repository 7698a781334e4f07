//! `VVOL` volume container: magic, version, dtype code, four u32 extents
//! (channels, depth, height, width), three f32 voxel spacings, then the raw
//! little-endian C-order payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Shape, Volume};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
pub const VVOL_HEADER_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VvolDType {
    F32 = 0,
    U8 = 1,
}

impl VvolDType {
    fn size(self) -> usize {
        match self {
            VvolDType::F32 => 4,
            VvolDType::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VvolHeader {
    pub dtype: VvolDType,
    pub shape: Shape,
    /// Millimetres per voxel along depth, height, width.
    pub spacing: [f32; 3],
}

impl VvolHeader {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VVOL_HEADER_LEN);
        out.extend_from_slice(VVOL_MAGIC);
        out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dtype as u32).to_le_bytes());
        let s = self.shape;
        for v in [s.channels, s.depth, s.height, s.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.spacing {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VVOL_HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated VVOL header: {} of {VVOL_HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != VVOL_MAGIC {
            return Err(Error::Format("not a VVOL file (bad magic)".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VVOL_VERSION {
            return Err(Error::Format(format!("unsupported VVOL version {version}")));
        }
        let dtype = match u32_at(8) {
            0 => VvolDType::F32,
            1 => VvolDType::U8,
            c => return Err(Error::Format(format!("unknown VVOL dtype code {c}"))),
        };
        let shape = Shape::new(
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
            u32_at(24) as usize,
        )
        .map_err(|e| Error::Format(format!("VVOL extents: {e}")))?;
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        Ok(VvolHeader {
            dtype,
            shape,
            spacing: [f32_at(28), f32_at(32), f32_at(36)],
        })
    }

    pub fn payload_len(&self) -> usize {
        self.shape.len() * self.dtype.size()
    }
}

fn check_payload(h: &VvolHeader, bytes: &[u8]) -> Result<()> {
    let want = VVOL_HEADER_LEN + h.payload_len();
    if bytes.len() < want {
        return Err(Error::Format(format!(
            "truncated VVOL payload: {} of {want} bytes",
            bytes.len()
        )));
    }
    if bytes.len() > want {
        return Err(Error::Format(format!(
            "VVOL file has {} trailing bytes",
            bytes.len() - want
        )));
    }
    Ok(())
}

pub fn encode_vvol(v: &Volume<f32>, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = VvolHeader {
        dtype: VvolDType::F32,
        shape: v.shape(),
        spacing,
    }
    .encode();
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels_vvol(l: &LabelVolume, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = VvolHeader {
        dtype: VvolDType::U8,
        shape: l.shape(),
        spacing,
    }
    .encode();
    out.extend_from_slice(l.data());
    out
}

pub fn decode_vvol(bytes: &[u8]) -> Result<(Volume<f32>, [f32; 3])> {
    let h = VvolHeader::decode(bytes)?;
    if h.dtype != VvolDType::F32 {
        return Err(Error::Format("expected a 32-bit float VVOL, found u8".into()));
    }
    check_payload(&h, bytes)?;
    let data = bytes[VVOL_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Volume::from_vec(h.shape, data)?, h.spacing))
}

pub fn decode_labels_vvol(bytes: &[u8]) -> Result<(LabelVolume, [f32; 3])> {
    let h = VvolHeader::decode(bytes)?;
    if h.dtype != VvolDType::U8 {
        return Err(Error::Format("expected a u8 VVOL, found 32-bit float".into()));
    }
    if h.shape.channels != 1 {
        return Err(Error::Format(format!(
            "label VVOL must have one channel, found {}",
            h.shape.channels
        )));
    }
    check_payload(&h, bytes)?;
    let l = LabelVolume::from_vec(h.shape.extents(), bytes[VVOL_HEADER_LEN..].to_vec())?;
    Ok((l, h.spacing))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_vvol(path: impl AsRef<Path>, v: &Volume<f32>, spacing: [f32; 3]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_vvol(v, spacing))
}

pub fn write_labels_vvol(path: impl AsRef<Path>, l: &LabelVolume, spacing: [f32; 3]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels_vvol(l, spacing))
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<(Volume<f32>, [f32; 3])> {
    decode_vvol(&read_bytes(path.as_ref())?)
}

pub fn read_labels_vvol(path: impl AsRef<Path>) -> Result<(LabelVolume, [f32; 3])> {
    decode_labels_vvol(&read_bytes(path.as_ref())?)
}

/// Header of a file on disk, reading only the first 40 bytes.
pub fn read_vvol_header(path: impl AsRef<Path>) -> Result<VvolHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(VVOL_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(VVOL_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    VvolHeader::decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_is_forty_bytes() {
        let l = LabelVolume::zeros([6, 8, 4]).unwrap();
        let bytes = encode_labels_vvol(&l, [1.0; 3]);
        assert_eq!(bytes.len(), VVOL_HEADER_LEN + 6 * 8 * 4);
        let h = VvolHeader {
            dtype: VvolDType::U8,
            shape: Shape::new(1, 4, 6, 8).unwrap(),
            spacing: [0.5, 0.5, 2.0],
        };
        assert_eq!(h.encode().len(), 4 + 4 + 4 + 4 * 4 + 3 * 4);
        assert_eq!(VvolHeader::decode(&h.encode()).unwrap(), h);
    }

    #[test]
    fn float_round_trip_is_bitwise() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut v = Volume::from_fn(Shape::new(2, 8, 8, 8).unwrap(), |_, _, _, _| r.random::<f32>() - 0.5).unwrap();
        v.data_mut()[3] = -0.0;
        v.data_mut()[4] = f32::MIN_POSITIVE / 2.0;
        let (back, spacing) = decode_vvol(&encode_vvol(&v, [0.9, 0.9, 5.0])).unwrap();
        assert_eq!(spacing, [0.9, 0.9, 5.0]);
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn format_errors() {
        let v = Volume::<f32>::zeros(Shape::new(1, 2, 2, 2).unwrap()).unwrap();
        let bytes = encode_vvol(&v, [1.0; 3]);
        let err = |r: Result<(Volume<f32>, [f32; 3])>| matches!(r, Err(Error::Format(_)));
        assert!(err(decode_vvol(&bytes[..bytes.len() - 1])));
        assert!(err(decode_vvol(&bytes[..20])));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(err(decode_vvol(&bad)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(err(decode_vvol(&bad)));
        let mut long = bytes.clone();
        long.push(0);
        assert!(err(decode_vvol(&long)));
        let labels = encode_labels_vvol(&LabelVolume::zeros([2, 2, 2]).unwrap(), [1.0; 3]);
        assert!(err(decode_vvol(&labels)));
        assert!(matches!(decode_labels_vvol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelVolume::from_vec([2, 3, 4], (0..24).map(|i| (i % 5) as u8).collect()).unwrap();
        let p = dir.path().join("nested/l.vvol");
        write_labels_vvol(&p, &l, [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(read_labels_vvol(&p).unwrap(), (l, [1.0, 2.0, 3.0]));
        assert_eq!(read_vvol_header(&p).unwrap().shape, Shape::new(1, 2, 3, 4).unwrap());
        assert!(matches!(read_vvol(dir.path().join("missing.vvol")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn random_shapes_round_trip(c in 1usize..3, d in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v = Volume::from_fn(Shape::new(c, d, h, w).unwrap(), |_, _, _, _| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff)).unwrap();
            let (back, _) = decode_vvol(&encode_vvol(&v, [1.0; 3])).unwrap();
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let l = LabelVolume::from_vec([d, h, w], (0..d * h * w).map(|_| r.random()).collect()).unwrap();
            prop_assert_eq!(decode_labels_vvol(&encode_labels_vvol(&l, [1.0; 3])).unwrap().0, l);
        }
    }
}
