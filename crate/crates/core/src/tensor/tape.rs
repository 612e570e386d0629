use std::sync::Arc;

use super::graph::Graph;
use super::ops::{self, AttentionLayout};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mask(Var, Tensor<f64>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    Softmax(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    ColMean(Var),
    GatherCols(Var, Vec<Vec<usize>>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations over `f64` values.
///
/// Values on the tape are never mutated after being recorded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every leaf that requires a gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, t: Tensor<f64>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn get(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` only if any input needs a gradient.
    fn record(&mut self, value: Tensor<f64>, inputs: &[Var], op: Op) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if needs {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Const, false)
        }
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// calling this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")),
                    (None, Op::Leaf) => Some(Tensor::zeros(node.value.shape())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                for &x in [a, b] {
                    self.accumulate(grads, x, |s| add_into(s, g));
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let cols = val(*r).len();
                self.accumulate(grads, *r, |s| {
                    for chunk in g.chunks(cols) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((s, &gi), &y) in s.iter_mut().zip(g).zip(bv) {
                        *s += gi * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *s += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |s| {
                for (s, &gi) in s.iter_mut().zip(g) {
                    *s += c * gi;
                }
            }),
            Op::Mask(a, m) => self.accumulate(grads, *a, |s| {
                for ((s, &gi), &mi) in s.iter_mut().zip(g).zip(m.data()) {
                    *s += gi * mi;
                }
            }),
            Op::MatMul(a, b) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                if self.nodes[a.0].needs_grad {
                    let ga = ops::matmul_nt(&gt, val(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, ga.data()));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ops::matmul_tn(val(*a), &gt)?;
                    self.accumulate(grads, *b, |s| add_into(s, gb.data()));
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                if self.nodes[a.0].needs_grad {
                    let ga = ops::matmul(&gt, val(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, ga.data()));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ops::matmul_tn(&gt, val(*a))?;
                    self.accumulate(grads, *b, |s| add_into(s, gb.data()));
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                self.layer_norm_backward(*x, *gamma, *beta, g, grads);
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *s += gi * ops::gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((s, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *s += gi / xi;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *s += 2.0 * xi * gi;
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |s| {
                for s in s.iter_mut() {
                    *s += g[0];
                }
            }),
            Op::ColMean(x) => {
                let xv = val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let inv = 1.0 / m as f64;
                self.accumulate(grads, *x, |s| {
                    for srow in s.chunks_mut(n) {
                        for (s, &gi) in srow.iter_mut().zip(g) {
                            *s += gi * inv;
                        }
                    }
                });
            }
            Op::GatherCols(x, index) => {
                let cols = val(*x).cols();
                self.accumulate(grads, *x, |s| {
                    let width = index.first().map_or(0, Vec::len);
                    for (r, idx) in index.iter().enumerate() {
                        for (c, &src) in idx.iter().enumerate() {
                            s[r * cols + src] += g[r * width + c];
                        }
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let cols = val(*x).cols();
                self.accumulate(grads, *x, |s| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                self.accumulate(grads, *a, |s| add_into(s, &g[..split]));
                self.accumulate(grads, *b, |s| add_into(s, &g[split..]));
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                self.attention_backward(*q, *k, *v, layout, *heads, probs, g, grads)
            }
        }
        Ok(())
    }

    fn layer_norm_backward(&self, x: Var, gamma: Var, beta: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xv = self.nodes[x.0].value.data();
        let gam = self.nodes[gamma.0].value.data();
        let n = gam.len();
        let mut gx = vec![0.0; xv.len()];
        let mut ggamma = vec![0.0; n];
        let mut gbeta = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        let mut gxhat = vec![0.0; n];
        for ((row, grow), gxrow) in xv.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + ops::LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                xhat[c] = (row[c] - mean) * rstd;
                gxhat[c] = grow[c] * gam[c];
                ggamma[c] += grow[c] * xhat[c];
                gbeta[c] += grow[c];
            }
            let mean_g = gxhat.iter().sum::<f64>() / n as f64;
            let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for c in 0..n {
                gxrow[c] = rstd * (gxhat[c] - mean_g - xhat[c] * mean_gx);
            }
        }
        self.accumulate(grads, x, |s| add_into(s, &gx));
        self.accumulate(grads, gamma, |s| add_into(s, &ggamma));
        self.accumulate(grads, beta, |s| add_into(s, &gbeta));
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.nodes[q.0].value.data(), self.nodes[k.0].value.data(), self.nodes[v.0].value.data());
        let d = self.nodes[q.0].value.cols();
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let nnz = layout.nnz();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut ds = Vec::new();
        for (i, span) in layout.spans().iter().enumerate() {
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let gout = &g[i * d + lo..i * d + hi];
                let base = h * nnz + layout.offset(i);
                let p = &probs[base..base + span.len()];
                ds.clear();
                let mut inner = 0.0;
                for (&pj, j) in p.iter().zip(span.keys()) {
                    let dp = ops::dot(gout, &vv[j * d + lo..j * d + hi]);
                    inner += pj * dp;
                    ds.push(dp);
                    for (gvj, &go) in gv[j * d + lo..j * d + hi].iter_mut().zip(gout) {
                        *gvj += pj * go;
                    }
                }
                for ((dsj, &pj), j) in ds.iter_mut().zip(p).zip(span.keys()) {
                    *dsj = pj * (*dsj - inner) * inv;
                    let kj = &kv[j * d + lo..j * d + hi];
                    for (gqi, &kk) in gq[i * d + lo..i * d + hi].iter_mut().zip(kj) {
                        *gqi += *dsj * kk;
                    }
                    let qi = &qv[i * d + lo..i * d + hi];
                    for (gkj, &qq) in gk[j * d + lo..j * d + hi].iter_mut().zip(qi) {
                        *gkj += *dsj * qq;
                    }
                }
            }
        }
        self.accumulate(grads, q, |s| add_into(s, &gq));
        self.accumulate(grads, k, |s| add_into(s, &gk));
        self.accumulate(grads, v, |s| add_into(s, &gv));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, t: &Tensor<f64>) -> Var {
        self.push(t.clone(), Op::Const, false)
    }

    fn gather_rows(&mut self, table: &Tensor<f64>, rows: &[usize]) -> Result<Var> {
        let value = ops::gather_rows(table, rows)?;
        Ok(self.push(value, Op::Const, false))
    }

    fn value(&self, v: &Var) -> Tensor<f64> {
        self.get(*v).clone()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = ops::zip_map("add", self.get(*a), self.get(*b), |x, y| x + y)?;
        Ok(self.record(value, &[*a, *b], Op::Add(*a, *b)))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let value = ops::add_row(self.get(*a), self.get(*row))?;
        Ok(self.record(value, &[*a, *row], Op::AddRow(*a, *row)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = ops::zip_map("mul", self.get(*a), self.get(*b), |x, y| x * y)?;
        Ok(self.record(value, &[*a, *b], Op::Mul(*a, *b)))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let value = self.get(*a).map(|v| v * c);
        self.record(value, &[*a], Op::Scale(*a, c))
    }

    fn mask(&mut self, a: &Var, mask: &Tensor<f64>) -> Result<Var> {
        let value = ops::zip_map("mask", self.get(*a), mask, |x, y| x * y)?;
        Ok(self.record(value, &[*a], Op::Mask(*a, mask.clone())))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = ops::matmul(self.get(*a), self.get(*b))?;
        Ok(self.record(value, &[*a, *b], Op::MatMul(*a, *b)))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = ops::matmul_nt(self.get(*a), self.get(*b))?;
        Ok(self.record(value, &[*a, *b], Op::MatMulNt(*a, *b)))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let value = ops::layer_norm(self.get(*x), self.get(*gamma), self.get(*beta))?;
        Ok(self.record(value, &[*x, *gamma, *beta], Op::LayerNorm(*x, *gamma, *beta)))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let value = self.get(*x).map(ops::gelu);
        self.record(value, &[*x], Op::Gelu(*x))
    }

    fn row_softmax(&mut self, x: &Var) -> Result<Var> {
        let value = ops::row_softmax(self.get(*x))?;
        Ok(self.record(value, &[*x], Op::Softmax(*x)))
    }

    fn ln(&mut self, x: &Var) -> Result<Var> {
        let value = ops::ln(self.get(*x))?;
        Ok(self.record(value, &[*x], Op::Ln(*x)))
    }

    fn square(&mut self, x: &Var) -> Var {
        let value = self.get(*x).map(|v| v * v);
        self.record(value, &[*x], Op::Square(*x))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let value = Tensor::scalar(self.get(*x).data().iter().sum());
        self.record(value, &[*x], Op::Sum(*x))
    }

    fn col_mean(&mut self, x: &Var) -> Result<Var> {
        let value = ops::col_mean(self.get(*x))?;
        Ok(self.record(value, &[*x], Op::ColMean(*x)))
    }

    fn gather_cols(&mut self, x: &Var, index: &[Vec<usize>]) -> Result<Var> {
        let value = ops::gather_cols(self.get(*x), index)?;
        Ok(self.record(value, &[*x], Op::GatherCols(*x, index.to_vec())))
    }

    fn select_rows(&mut self, x: &Var, rows: &[usize]) -> Result<Var> {
        let value = ops::gather_rows(self.get(*x), rows)?;
        Ok(self.record(value, &[*x], Op::SelectRows(*x, rows.to_vec())))
    }

    fn concat_rows(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = ops::concat_rows(self.get(*a), self.get(*b))?;
        Ok(self.record(value, &[*a, *b], Op::ConcatRows(*a, *b)))
    }

    fn attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        layout: &Arc<AttentionLayout>,
        heads: usize,
        capture: bool,
    ) -> Result<(Var, Option<Tensor<f64>>)> {
        let (out, probs) = ops::attention(self.get(*q), self.get(*k), self.get(*v), layout, heads)?;
        let dense = capture.then(|| ops::unpack_attention(&probs, layout, heads));
        let op = Op::Attention { q: *q, k: *k, v: *v, layout: Arc::clone(layout), heads, probs };
        Ok((self.record(out, &[*q, *k, *v], op), dense))
    }
}
