//! ODSV volume files.
//!
//! Little-endian layout, normative:
//!
//! ```text
//! magic "ODSV" (4 bytes)
//! u32   version = 1
//! u8    dtype          0 = f32 image, 1 = u8 labels
//! u8    ndim           4 for volumes [c,D,H,W], 3 for masks [D,H,W]
//! u32   extents[ndim]
//! f32   spacing[3]     millimetres per voxel (z, y, x)
//! raw row-major payload (f32 LE or u8)
//! ```
//!
//! Readers verify magic, version, dtype, extent count, payload length, and
//! reject trailing bytes; a short payload is reported as truncation, never
//! read out of bounds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, LabelMask, Result, Volume};

pub const MAGIC: [u8; 4] = *b"ODSV";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

fn write_header(w: &mut impl Write, dtype: u8, extents: &[usize], spacing: [f32; 3]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype, extents.len() as u8])?;
    for &e in extents {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

struct Header {
    dtype: u8,
    extents: Vec<usize>,
    spacing: [f32; 3],
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Io(e)
        }
    })
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let mut u32b = [0u8; 4];
    read_exact_or_truncated(r, &mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let mut two = [0u8; 2];
    read_exact_or_truncated(r, &mut two)?;
    let (dtype, ndim) = (two[0], two[1]);
    if dtype > 1 {
        return Err(DataError::BadDtype(dtype));
    }
    if !(1..=8).contains(&ndim) {
        return Err(DataError::BadHeader(format!("ndim {ndim} outside 1..=8")));
    }
    let mut extents = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        read_exact_or_truncated(r, &mut u32b)?;
        let e = u32::from_le_bytes(u32b);
        if e == 0 {
            return Err(DataError::BadHeader("zero extent".into()));
        }
        extents.push(e as usize);
    }
    let mut spacing = [0.0f32; 3];
    for s in spacing.iter_mut() {
        read_exact_or_truncated(r, &mut u32b)?;
        *s = f32::from_le_bytes(u32b);
        if !(*s > 0.0) {
            return Err(DataError::BadHeader(format!("non-positive spacing {s}")));
        }
    }
    Ok(Header { dtype, extents, spacing })
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut one = [0u8; 1];
    match r.read(&mut one)? {
        0 => Ok(()),
        _ => Err(DataError::TrailingBytes),
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    v.check_finite()?;
    let mut w = BufWriter::new(File::create(path)?);
    let extents = [v.channels, v.dims[0], v.dims[1], v.dims[2]];
    write_header(&mut w, DTYPE_F32, &extents, v.spacing)?;
    for &val in &v.data {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dtype != DTYPE_F32 {
        return Err(DataError::DtypeMismatch { expected: "f32 volume", found: "u8 labels" });
    }
    if h.extents.len() != 4 {
        return Err(DataError::BadHeader(format!("volume needs 4 extents, got {}", h.extents.len())));
    }
    let n: usize = h.extents.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact_or_truncated(&mut r, &mut payload)?;
    expect_eof(&mut r)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let v = Volume {
        channels: h.extents[0],
        dims: [h.extents[1], h.extents[2], h.extents[3]],
        spacing: h.spacing,
        data,
    };
    v.check_finite()?;
    Ok(v)
}

pub fn save_mask(m: &LabelMask, path: &Path) -> Result<()> {
    m.validate_labels()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_U8, &m.dims, m.spacing)?;
    w.write_all(&m.labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dtype != DTYPE_U8 {
        return Err(DataError::DtypeMismatch { expected: "u8 labels", found: "f32 volume" });
    }
    if h.extents.len() != 3 {
        return Err(DataError::BadHeader(format!("mask needs 3 extents, got {}", h.extents.len())));
    }
    let n: usize = h.extents.iter().product();
    let mut labels = vec![0u8; n];
    read_exact_or_truncated(&mut r, &mut labels)?;
    expect_eof(&mut r)?;
    let m = LabelMask { dims: [h.extents[0], h.extents[1], h.extents[2]], spacing: h.spacing, labels };
    m.validate_labels()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("odsv-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = Volume::zeros(2, [3, 4, 5], [1.0, 0.5, 2.0]);
        for x in v.data.iter_mut() {
            *x = rng.gen_range(-10.0..10.0);
        }
        let path = tmpdir().join("vol.odsv");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(v, loaded);
        let b1 = std::fs::read(&path).unwrap();
        save_volume(&loaded, &path).unwrap();
        assert_eq!(b1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn mask_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = LabelMask::zeros([4, 4, 4], [1.0; 3]);
        for l in m.labels.iter_mut() {
            *l = rng.gen_range(0..4);
        }
        let path = tmpdir().join("mask.odsv");
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn wrong_magic_is_structured_error() {
        let path = tmpdir().join("badmagic.odsv");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), DataError::BadMagic(_)));
    }

    #[test]
    fn truncated_payload_is_structured_error() {
        let v = Volume::zeros(1, [2, 2, 2], [1.0; 3]);
        let path = tmpdir().join("trunc.odsv");
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), DataError::Truncated));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let v = Volume::zeros(1, [2, 2, 2], [1.0; 3]);
        let path = tmpdir().join("trail.odsv");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), DataError::TrailingBytes));
    }

    #[test]
    fn dtype_mismatch_is_structured_error() {
        let m = LabelMask::zeros([2, 2, 2], [1.0; 3]);
        let path = tmpdir().join("dtype.odsv");
        save_mask(&m, &path).unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), DataError::DtypeMismatch { .. }));
    }

    #[test]
    fn bad_version_is_structured_error() {
        let v = Volume::zeros(1, [2, 2, 2], [1.0; 3]);
        let path = tmpdir().join("ver.odsv");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), DataError::BadVersion(9)));
    }
}
