//! Dense row-major N-d arrays with reverse-mode differentiation.
//!
//! Storage is always contiguous row-major; there are no views or strided
//! aliases. Binary operations broadcast only over extent-1 axes of
//! equal-rank operands. In debug and test builds every operation scans its
//! output for NaN/Inf and surfaces an error instead of propagating silently;
//! release builds skip the scan.

use std::fmt;

use thiserror::Error;

pub mod fdcheck;
pub mod tape;

pub use tape::{Tape, Var};

/// Element precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar element of a tensor: `f32` for training, `f64` for verification.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $prec:expr) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const PRECISION: Precision = $prec;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if other > self {
                    other
                } else {
                    self
                }
            }
        }
    };
}

impl_element!(f32, Precision::Single);
impl_element!(f64, Precision::Double);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape must have at least one extent")]
    EmptyShape,
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shapes {a:?} and {b:?} do not broadcast (equal rank, extent-1 axes only)")]
    Broadcast { a: Vec<usize>, b: Vec<usize> },
    #[error("matmul inner extents differ: [{m}, {ka}] x [{kb}, {n}]")]
    InnerExtent { m: usize, ka: usize, kb: usize, n: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: duplicate axis {axis}")]
    DuplicateAxis { op: &'static str, axis: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: shapes {a:?} and {b:?} must match")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: divisor magnitude below 1e-30")]
    TinyDivisor { op: &'static str },
    #[error("softmax temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("backward root must be a scalar, shape is {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("reshape {from:?} -> {to:?} changes the element count")]
    ReshapeCount { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: range {start}..{} exceeds extent {extent} on axis {axis}", start + len)]
    RangeOutOfBounds {
        op: &'static str,
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: output extent would be non-positive for input shape {shape:?}")]
    BadGeometry { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-d array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn from_data(shape: &[usize], data: Vec<E>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.check_finite("from_data")?;
        Ok(t)
    }

    pub fn full(shape: &[usize], fill: E) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor { shape: shape.to_vec(), data: vec![fill; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::ONE)
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        E::PRECISION
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Linear index of a coordinate tuple.
    pub fn index_of(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let mut idx = 0;
        let mut stride = 1;
        for d in (0..self.shape.len()).rev() {
            debug_assert!(coords[d] < self.shape[d]);
            idx += coords[d] * stride;
            stride *= self.shape[d];
        }
        idx
    }

    /// Coordinate tuple of a linear index; inverse of [`index_of`](Self::index_of).
    pub fn coords_of(&self, mut linear: usize) -> Vec<usize> {
        let mut coords = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            coords[d] = linear % self.shape[d];
            linear /= self.shape[d];
        }
        coords
    }

    #[inline]
    pub fn at(&self, coords: &[usize]) -> E {
        self.data[self.index_of(coords)]
    }

    pub fn set(&mut self, coords: &[usize], v: E) {
        let i = self.index_of(coords);
        self.data[i] = v;
    }

    /// Single scalar value; panics on non-scalar tensors.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ReshapeCount { from: self.shape.clone(), to: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// NaN/Inf scan; a full scan in debug and test builds, skipped in release.
    #[inline]
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        #[cfg(debug_assertions)]
        {
            if !self.data.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op });
            }
        }
        let _ = op;
        Ok(())
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Broadcast shape of two equal-rank shapes under the extent-1 rule.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::Broadcast { a: a.to_vec(), b: b.to_vec() });
    }
    let mut out = Vec::with_capacity(a.len());
    for (&ea, &eb) in a.iter().zip(b) {
        if ea == eb || ea == 1 || eb == 1 {
            out.push(ea.max(eb));
        } else {
            return Err(TensorError::Broadcast { a: a.to_vec(), b: b.to_vec() });
        }
    }
    Ok(out)
}
