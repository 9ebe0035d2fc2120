//! Dense row-major tensors, value-level kernels, a reverse-mode tape and a
//! finite-difference gradient checker.
//!
//! [`Tensor`] is an immutable value: every operation returns a new tensor.
//! Floating-point code is generic over [`Real`] (`f32` or `f64`); `u16` is a
//! storage-only element type used for label maps and masks.

mod autodiff;
mod gradcheck;
mod io;
pub mod kernels;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use autodiff::{ContrastLabels, Gradients, Graph, Var};
pub use gradcheck::{
    check_graph_gradients, finite_diff_check, relative_error, GradReport, ParamReport,
    RELATIVE_FLOOR,
};
pub use io::{
    encode_tensor, read_tensor, read_tensor_from, write_tensor, write_tensor_to, AnyTensor,
};
pub use kernels::{cosine_similarity, pearson_corr};

/// On-disk element type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U16 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::F64 => write!(f, "float64"),
            DType::U16 => write!(f, "uint16"),
        }
    }
}

/// A scalar that can live in a [`Tensor`] and be written little-endian.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn put_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `DTYPE.size()` bytes.
    fn get_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $n:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::F32, 4);
impl_element!(f64, DType::F64, 8);
impl_element!(u16, DType::U16, 2);

/// Floating-point element used by every numerical routine.
pub trait Real: Element + Float + FromPrimitive + Sum + fmt::Display {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq, Eq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) || expected != data.len() {
            return Err(Error::shape("tensor", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            dims: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extent of a rank-2 view (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Checks that `self` is rank 2 and returns `(rows, cols)`.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|x| U::from(x).expect("finite cast"))
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.dims)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, " {head:?}")?;
        if self.data.len() > SHOWN {
            write!(f, "…")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_dims() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0f64; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn row_views() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 2);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.at(2, 0), 5.0);
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F64, DType::U16] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(0), None);
    }
}
