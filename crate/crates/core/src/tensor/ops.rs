//! Forward kernels shared by the eager and taped graphs.
//!
//! Every kernel treats its inputs as `[rows × cols]` with `cols` the trailing
//! axis. Matrix products accumulate each output element in ascending inner
//! index order, so a row's result never depends on which other rows were
//! batched with it.

use std::ops::Range;

use super::{Element, Result, Tensor, TensorError};

fn require_2d<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(TensorError::Dimension { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

/// `a [m×k] · b [k×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_2d("matmul", a, b)?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(TensorError::Dimension { op: "matmul", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_2d("matmul_nt", a, b)?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    if b.shape()[1] != k {
        return Err(TensorError::Dimension { op: "matmul_nt", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(arow, &bd[j * k..(j + 1) * k]));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_2d("matmul_tn", a, b)?;
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(TensorError::Dimension { op: "matmul_tn", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 {
        return Err(TensorError::Contract(format!("transpose expects a matrix, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data()[i * n + j]);
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn zip_map<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a length-`cols` vector to every row.
pub fn add_row<T: Element>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = a.cols();
    if row.len() != cols {
        return Err(TensorError::Dimension { op: "add_row", left: a.shape().to_vec(), right: row.shape().to_vec() });
    }
    let r = row.data();
    let data = a.data().chunks(cols).flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn row_softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.cols();
    if n == 0 {
        return Err(TensorError::Contract("softmax over an empty axis".into()));
    }
    if !x.all_finite() {
        return Err(TensorError::Numeric { op: "row_softmax", detail: "input contains NaN or infinity".into() });
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalisation to zero mean and unit variance, then `γ·x̂ + β`.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let eps = T::of(LAYER_NORM_EPS);
    let inv_n = T::of(1.0 / n as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * rstd * g + b);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn ln<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(bad) = x.data().iter().find(|v| **v <= T::zero() || !v.is_finite()) {
        return Err(TensorError::Numeric { op: "ln", detail: format!("logarithm of {bad:?}") });
    }
    Ok(x.map(|v| v.ln()))
}

pub fn gather_rows<T: Element>(table: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let cols = table.cols();
    let total = table.rows();
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        if r >= total {
            return Err(TensorError::Contract(format!("row index {r} out of range for {:?}", table.shape())));
        }
        out.extend_from_slice(table.row(r));
    }
    Tensor::new(vec![rows.len(), cols], out)
}

/// `out[r][c] = x[r][index[r][c]]`.
pub fn gather_cols<T: Element>(x: &Tensor<T>, index: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (rows, cols) = (x.rows(), x.cols());
    if index.len() != rows {
        return Err(TensorError::Contract(format!("gather_cols: {} index rows for {rows} tensor rows", index.len())));
    }
    let width = index.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(rows * width);
    for (r, idx) in index.iter().enumerate() {
        if idx.len() != width || idx.iter().any(|&c| c >= cols) {
            return Err(TensorError::Contract(format!("gather_cols: bad index row {r}")));
        }
        out.extend(idx.iter().map(|&c| x.data()[r * cols + c]));
    }
    Tensor::new(vec![rows, width], out)
}

pub fn concat_rows<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(TensorError::Dimension { op: "concat_rows", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Mean over rows: `[m×n] → [1×n]`.
pub fn col_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = (x.rows(), x.cols());
    if m == 0 {
        return Err(TensorError::Contract("col_mean of zero rows".into()));
    }
    let mut out = vec![T::zero(); n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    let inv = T::of(1.0 / m as f64);
    for o in &mut out {
        *o = *o * inv;
    }
    Tensor::new(vec![1, n], out)
}

/// Keys visible to one query row: `[0, shared) ∪ own`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySpan {
    pub shared: usize,
    pub own: Range<usize>,
}

impl KeySpan {
    pub fn len(&self) -> usize {
        self.shared + self.own.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.shared).chain(self.own.clone())
    }
}

/// Per-query visibility over the key rows of one attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    spans: Vec<KeySpan>,
    offsets: Vec<usize>,
    key_len: usize,
}

impl AttentionLayout {
    pub fn new(spans: Vec<KeySpan>, key_len: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(spans.len() + 1);
        let mut acc = 0;
        for (i, s) in spans.iter().enumerate() {
            let overlaps = !s.own.is_empty() && s.own.start < s.shared;
            if s.is_empty() || overlaps || s.shared > key_len || s.own.end > key_len {
                return Err(TensorError::Contract(format!("query {i}: invalid key span {s:?} for {key_len} keys")));
            }
            offsets.push(acc);
            acc += s.len();
        }
        offsets.push(acc);
        Ok(Self { spans, offsets, key_len })
    }

    /// Plain causal layout: query `j` sees keys `0..=past + j`.
    pub fn causal(queries: usize, past: usize) -> Self {
        let spans = (0..queries).map(|j| KeySpan { shared: past + j + 1, own: 0..0 }).collect();
        Self::new(spans, past + queries).expect("causal layout is well formed")
    }

    pub fn queries(&self) -> usize {
        self.spans.len()
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn spans(&self) -> &[KeySpan] {
        &self.spans
    }

    /// Number of (query, key) pairs, i.e. packed probability entries per head.
    pub fn nnz(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub(crate) fn offset(&self, query: usize) -> usize {
        self.offsets[query]
    }
}

/// Multi-head scaled dot-product attention restricted to `layout`.
///
/// Returns the attended values `[N × d]` and the attention weights packed
/// per head in layout order (`heads × layout.nnz()`).
pub fn attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttentionLayout,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) || k.cols() != d || v.cols() != d {
        return Err(TensorError::Dimension { op: "attention", left: q.shape().to_vec(), right: k.shape().to_vec() });
    }
    if q.rows() != layout.queries() || k.rows() != layout.key_len() || v.rows() != k.rows() {
        return Err(TensorError::Dimension {
            op: "attention",
            left: vec![q.rows(), layout.queries()],
            right: vec![k.rows(), layout.key_len()],
        });
    }
    let dh = d / heads;
    let inv = T::of(1.0 / (dh as f64).sqrt());
    let nnz = layout.nnz();
    let mut probs = vec![T::zero(); heads * nnz];
    let mut out = vec![T::zero(); q.rows() * d];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for (i, span) in layout.spans().iter().enumerate() {
        for h in 0..heads {
            let hb = h * dh..(h + 1) * dh;
            let qh = &qd[i * d + hb.start..i * d + hb.end];
            let base = h * nnz + layout.offset(i);
            let p = &mut probs[base..base + span.len()];
            let mut max = T::neg_infinity();
            for (slot, j) in p.iter_mut().zip(span.keys()) {
                let s = dot(qh, &kd[j * d + hb.start..j * d + hb.end]) * inv;
                max = max.max(s);
                *slot = s;
            }
            let mut sum = T::zero();
            for slot in p.iter_mut() {
                *slot = (*slot - max).exp();
                sum = sum + *slot;
            }
            let o = &mut out[i * d + hb.start..i * d + hb.end];
            for (slot, j) in p.iter_mut().zip(span.keys()) {
                *slot = *slot / sum;
                let vj = &vd[j * d + hb.start..j * d + hb.end];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov = *ov + *slot * vv;
                }
            }
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, probs))
}

/// Expands packed attention weights to a dense `[heads × N × key_len]` tensor.
pub fn unpack_attention<T: Element>(packed: &[T], layout: &AttentionLayout, heads: usize) -> Tensor<f64> {
    let (n, m) = (layout.queries(), layout.key_len());
    let nnz = layout.nnz();
    let mut dense = vec![0.0; heads * n * m];
    for h in 0..heads {
        for (i, span) in layout.spans().iter().enumerate() {
            let base = h * nnz + layout.offset(i);
            for (t, j) in span.keys().enumerate() {
                dense[(h * n + i) * m + j] = packed[base + t].as_f64();
            }
        }
    }
    Tensor::new(vec![heads, n, m], dense).expect("dense attention shape")
}
