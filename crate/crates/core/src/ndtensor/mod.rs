//! Minimal reverse-mode differentiable tensor engine.
//!
//! Dense row-major buffers in 32- or 64-bit floats, a define-by-run tape
//! rebuilt on every forward pass, and exact adjoints for every registered
//! operation. Gradients are checked against central finite differences in
//! the test suite (see [`gradcheck`]).

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod sample;
pub mod tape;

mod basic;

pub use conv::{ConvSpec, PadMode};
pub use sample::SampleMode;
pub use tape::{NodeId, Tape};

/// Element type of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element trait: IEEE float plus the GEMM kernel and
/// little-endian codec the engine needs.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major C[m x n] = alpha * A[m x k] * B[k x n] + beta * C, with
    /// explicit strides (rs = stride between rows, cs = between columns).
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    /// Bit pattern widened to u64, for bit-exactness checks.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: rank mismatch: expected {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: zero extent on axis {axis}")]
    ZeroExtent { op: &'static str, axis: usize },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected scalar output, got {numel} elements")]
    NotScalar { op: &'static str, numel: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array with optional linkage into the tape that
/// produced it. Cloning is cheap (the buffer is shared).
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    values: Arc<Vec<F>>,
    node: Option<NodeId>,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{{shape: {:?}, tracked: {}, values: ",
            self.shape,
            self.node.is_some()
        )?;
        if self.numel() <= 8 {
            write!(f, "{:?}}}", &self.values[..])
        } else {
            write!(f, "[{} elements]}}", self.numel())
        }
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if numel_of(&shape) != values.len() {
            return Err(TensorError::Invalid {
                op: "Tensor::new",
                msg: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    numel_of(&shape),
                    values.len()
                ),
            });
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![F::zero(); numel_of(shape)]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![value; numel_of(shape)]),
            node: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::cast(v)).collect())
    }

    pub(crate) fn from_shared(shape: Vec<usize>, values: Arc<Vec<F>>) -> Self {
        debug_assert_eq!(numel_of(&shape), values.len());
        Self {
            shape,
            values,
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, values: Vec<F>, node: NodeId) -> Self {
        debug_assert_eq!(numel_of(&shape), values.len());
        Self {
            shape,
            values: Arc::new(values),
            node: Some(node),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy: same buffer, no graph linkage.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "Tensor::item",
                numel: self.numel(),
            });
        }
        Ok(self.values[0])
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Batch size, assuming [B, C, spatial...] layout.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Channel count, assuming [B, C, spatial...] layout.
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extents, assuming [B, C, spatial...] layout.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Bitwise equality of shape and buffer contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Convert buffer to f64 (lossless for both supported dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

pub(crate) fn check_same_shape<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<()> {
    if a.shape.len() != b.shape.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: a.shape.len(),
            got: b.shape.len(),
        });
    }
    for (axis, (&ea, &eb)) in a.shape.iter().zip(b.shape.iter()).enumerate() {
        if ea != eb {
            return Err(TensorError::ShapeMismatch {
                op,
                axis,
                expected: ea,
                got: eb,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_strides() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(t.spatial(), &[4]);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn bit_eq_detects_sign_of_zero() {
        let a = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.detach()));
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [Dtype::F32, Dtype::F64] {
            assert_eq!(Dtype::from_code(d.code()), Some(d));
        }
        assert_eq!(Dtype::from_code(9), None);
    }
}
