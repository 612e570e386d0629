use std::marker::PhantomData;
use std::sync::Arc;

use super::ops::{self, AttentionLayout};
use super::{Element, Result, Tensor};

/// Operations the transformer and the loss are written against.
///
/// Constants always enter as `f64` tensors and are converted to the graph's
/// element type on the way in.
pub trait Graph {
    type Value: Clone;

    fn constant(&mut self, t: &Tensor<f64>) -> Self::Value;
    /// Rows of a constant table, e.g. embedding lookup.
    fn gather_rows(&mut self, table: &Tensor<f64>, rows: &[usize]) -> Result<Self::Value>;
    fn value(&self, v: &Self::Value) -> Tensor<f64>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Adds a `cols`-length vector to every row.
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    /// Elementwise product with a constant tensor (dropout masks).
    fn mask(&mut self, a: &Self::Value, mask: &Tensor<f64>) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a · bᵀ`.
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Self::Value;
    fn row_softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn ln(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn square(&mut self, x: &Self::Value) -> Self::Value;
    /// Sum of all elements, as a scalar.
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    fn col_mean(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn gather_cols(&mut self, x: &Self::Value, index: &[Vec<usize>]) -> Result<Self::Value>;
    fn select_rows(&mut self, x: &Self::Value, rows: &[usize]) -> Result<Self::Value>;
    fn concat_rows(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Masked multi-head attention. With `capture`, also returns the dense
    /// weights `[heads × queries × keys]`.
    fn attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        layout: &Arc<AttentionLayout>,
        heads: usize,
        capture: bool,
    ) -> Result<(Self::Value, Option<Tensor<f64>>)>;
}

/// Untaped evaluation in element type `T`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager<T = f64>(PhantomData<T>);

impl<T: Element> Eager<T> {
    pub fn new() -> Self {
        Self(PhantomData)
    }
}

impl<T: Element> Graph for Eager<T> {
    type Value = Tensor<T>;

    fn constant(&mut self, t: &Tensor<f64>) -> Tensor<T> {
        t.cast()
    }

    fn gather_rows(&mut self, table: &Tensor<f64>, rows: &[usize]) -> Result<Tensor<T>> {
        Ok(ops::gather_rows(table, rows)?.cast())
    }

    fn value(&self, v: &Tensor<T>) -> Tensor<f64> {
        v.cast()
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::zip_map("add", a, b, |x, y| x + y)
    }

    fn add_row(&mut self, a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add_row(a, row)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::zip_map("mul", a, b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Tensor<T>, c: f64) -> Tensor<T> {
        let c = T::of(c);
        a.map(|v| v * c)
    }

    fn mask(&mut self, a: &Tensor<T>, mask: &Tensor<f64>) -> Result<Tensor<T>> {
        ops::zip_map("mask", a, &mask.cast(), |x, y| x * y)
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul(a, b)
    }

    fn matmul_nt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul_nt(a, b)
    }

    fn layer_norm(&mut self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, gamma, beta)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(ops::gelu)
    }

    fn row_softmax(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::row_softmax(x)
    }

    fn ln(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::ln(x)
    }

    fn square(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v * v)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(x.data().iter().copied().sum())
    }

    fn col_mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::col_mean(x)
    }

    fn gather_cols(&mut self, x: &Tensor<T>, index: &[Vec<usize>]) -> Result<Tensor<T>> {
        ops::gather_cols(x, index)
    }

    fn select_rows(&mut self, x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        ops::gather_rows(x, rows)
    }

    fn concat_rows(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::concat_rows(a, b)
    }

    fn attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        layout: &Arc<AttentionLayout>,
        heads: usize,
        capture: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<f64>>)> {
        let (out, probs) = ops::attention(q, k, v, layout, heads)?;
        let dense = capture.then(|| ops::unpack_attention(&probs, layout, heads));
        Ok((out, dense))
    }
}
