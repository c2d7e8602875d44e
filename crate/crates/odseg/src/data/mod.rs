//! Volumes, label masks, synthetic phantoms, augmentation, normalization,
//! patch sampling, and the ODSV on-disk format.

use thiserror::Error;

pub mod augment;
pub mod io;
pub mod patch;
pub mod phantom;

pub use augment::{augment, AugmentConfig};
pub use patch::{sample_patch, PatchSample};
pub use phantom::{generate_phantom, IntensityProfile, PhantomSpec};

/// Background and the three foreground tissue labels.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROSIS: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"ODSV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unknown dtype byte {0}")]
    BadDtype(u8),
    #[error("dtype mismatch: expected {expected}, file holds {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("file truncated: payload shorter than the header declares")]
    Truncated,
    #[error("trailing bytes after the declared payload")]
    TrailingBytes,
    #[error("label {0} outside {{0,1,2,3}}")]
    LabelOutOfRange(u8),
    #[error("foreground mask is empty")]
    EmptyForeground,
    #[error("volume extents {extents:?} too small for the requested radii")]
    ExtentsTooSmall { extents: [usize; 3] },
    #[error("crop {requested:?} larger than volume {dims:?}")]
    CropTooLarge { requested: [usize; 3], dims: [usize; 3] },
    #[error("patch {requested:?} larger than volume {dims:?}")]
    PatchTooLarge { requested: [usize; 3], dims: [usize; 3] },
    #[error("volume dims {a:?} and mask dims {b:?} differ")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in volume data")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Multi-channel 3D image, `[channels, D, H, W]` row-major, single
/// precision, with isotropic-by-default voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3], spacing: [f32; 3]) -> Self {
        let n = channels * dims[0] * dims[1] * dims[2];
        Volume { channels, dims, spacing, data: vec![0.0; n] }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, z, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DataError::NonFinite)
        }
    }
}

/// Voxel labels over {0 background, 1 necrosis, 2 edema, 3 enhancing}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        LabelMask { dims, spacing, labels: vec![0; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u8) {
        let i = self.index(z, y, x);
        self.labels[i] = v;
    }

    pub fn validate_labels(&self) -> Result<()> {
        match self.labels.iter().find(|&&l| l > 3) {
            Some(&l) => Err(DataError::LabelOutOfRange(l)),
            None => Ok(()),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Voxels where any channel is nonzero (phantom background is exactly 0, as
/// in skull-stripped acquisitions).
pub fn foreground_mask(v: &Volume) -> Vec<bool> {
    let n = v.voxels();
    let mut fg = vec![false; n];
    for c in 0..v.channels {
        for (f, &val) in fg.iter_mut().zip(v.channel(c)) {
            *f = *f || val != 0.0;
        }
    }
    fg
}

/// Per-channel `(x - mean_fg) / std_fg` computed over the foreground mask
/// (std floored at 1e-8); voxels outside the mask are set to 0.
pub fn zscore_normalize(v: &Volume, fg: &[bool]) -> Result<Volume> {
    let n = v.voxels();
    assert_eq!(fg.len(), n, "foreground mask length mismatch");
    let count = fg.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(DataError::EmptyForeground);
    }
    let mut out = v.clone();
    for c in 0..v.channels {
        let ch = v.channel(c);
        let mut mean = 0.0f64;
        for (i, &val) in ch.iter().enumerate() {
            if fg[i] {
                mean += val as f64;
            }
        }
        mean /= count as f64;
        let mut var = 0.0f64;
        for (i, &val) in ch.iter().enumerate() {
            if fg[i] {
                let d = val as f64 - mean;
                var += d * d;
            }
        }
        let std = (var / count as f64).sqrt().max(1e-8);
        let och = out.channel_mut(c);
        for i in 0..n {
            och[i] = if fg[i] { ((ch[i] as f64 - mean) / std) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}
