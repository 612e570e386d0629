//! Dense row-major tensors with a small reverse-mode differentiation tape.
//!
//! Values are plain [`Tensor`]s. Computations that must be differentiated are
//! recorded on a [`Tape`]; everything else runs through [`Eager`]. Both
//! implement [`Graph`], so model code is written once and runs either way.

mod check;
mod graph;
pub mod ops;
mod tape;

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{central_difference, finite_diff_check, max_relative_error};
pub use graph::{Eager, Graph};
pub use ops::{AttentionLayout, KeySpan};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite or out-of-domain value ({detail})")]
    Numeric { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type. Only `f32` and `f64` implement it.
pub trait Element: Float + Sum + Default + fmt::Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor<T>", bound(deserialize = "T: Element + Deserialize<'de>"))]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct RawTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> TryFrom<RawTensor<T>> for Tensor<T> {
    type Error = TensorError;
    fn try_from(raw: RawTensor<T>) -> Result<Self> {
        Self::new(raw.shape, raw.data)
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Dimension { op: "from_rows", left: vec![cols], right: vec![row.len()] });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a 2-D view: everything but the trailing axis collapsed.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::Shape { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        ops::matmul(self, other)
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn row_softmax(&self) -> Result<Self> {
        ops::row_softmax(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        ops::transpose(self)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{:?}, {:?}, ... {} values]", self.shape, self.data[0], self.data[1], self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(m.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap().row_softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap().row_softmax().unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap().row_softmax().unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(t.row_softmax(), Err(TensorError::Numeric { .. })));
        let t = Tensor::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(t.row_softmax().is_err());
    }

    #[test]
    fn f32_cast_round_trips_small_values() {
        let t = Tensor::from_rows(&[vec![0.5, -0.25]]).unwrap();
        let back: Tensor<f64> = t.cast::<f32>().cast();
        assert_eq!(back, t);
    }
}
