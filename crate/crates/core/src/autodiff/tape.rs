//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its forward value and parent indices; parents always precede their
//! children, so a single reverse sweep visits every node once.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to each norm in [`Tape::cosine_sim`] and [`Tape::normalize_rows`].
pub const NORM_EPS: f64 = 1e-8;
/// Variance epsilon in [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, exposed for diagnostics and for the generic [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    AddRow,
    Scale,
    Shift,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    RowSoftmax,
    LayerNorm,
    Gelu,
    CosineSim,
    NormalizeRows,
    Mean,
    Sum,
    Select,
    Log,
    Neg,
    ClampMin,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Shift(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    RowSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(usize),
    CosineSim(usize, usize),
    NormalizeRows(usize),
    Mean(usize),
    Sum(usize),
    Select(usize, usize),
    Log(usize),
    Neg(usize),
    ClampMin(usize, S),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|&v| v * v).sum::<S>().sqrt()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Trainable leaves receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Dispatches an operation by tag. Parameterized ops take their parameter
    /// from `arg` (scale factor, shift, clamp bound, flat index). Slices keep
    /// everything from index `arg` onward.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], arg: f64) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let idx = || arg as usize;
        match kind {
            OpKind::MatMul => need(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => need(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Add => need(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::AddRow => need(2).and_then(|_| self.add_row(inputs[0], inputs[1])),
            OpKind::Scale => need(1).and_then(|_| self.scale(inputs[0], S::lit(arg))),
            OpKind::Shift => need(1).and_then(|_| self.shift(inputs[0], S::lit(arg))),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::SliceRows => need(1).and_then(|_| {
                let rows = self.value(inputs[0]).rows();
                self.slice_rows(inputs[0], idx(), rows.saturating_sub(idx()))
            }),
            OpKind::SliceCols => need(1).and_then(|_| {
                let cols = self.value(inputs[0]).cols();
                self.slice_cols(inputs[0], idx(), cols.saturating_sub(idx()))
            }),
            OpKind::RowSoftmax => need(1).and_then(|_| self.row_softmax(inputs[0])),
            OpKind::LayerNorm => need(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2])),
            OpKind::Gelu => need(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::CosineSim => need(2).and_then(|_| self.cosine_sim(inputs[0], inputs[1])),
            OpKind::NormalizeRows => need(1).and_then(|_| self.normalize_rows(inputs[0])),
            OpKind::Mean => need(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Sum => need(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Select => need(1).and_then(|_| self.select(inputs[0], idx())),
            OpKind::Log => need(1).and_then(|_| self.log(inputs[0])),
            OpKind::Neg => need(1).and_then(|_| self.neg(inputs[0])),
            OpKind::ClampMin => need(1).and_then(|_| self.clamp_min(inputs[0], S::lit(arg))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, data)?, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        self.push(Tensor::matrix(c, r, data)?, Op::Transpose(a.0), rg, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let (r, c) = va.dims2();
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(r, c, data)?, Op::Add(a.0, b.0), rg, "add")
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (r, c) = vx.dims2();
        if vr.dims2() != (1, c) {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", vx.shape(), vr.shape())));
        }
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Tensor::matrix(r, c, data)?, Op::AddRow(x.0, row.0), rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::Scale(a.0, s), rg, "scale")
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, s: S) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| x + s).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::Shift(a.0), rg, "shift")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::shape("concat_rows", format!("width {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::ConcatRows(parts.iter().map(|p| p.0).collect());
        self.push(Tensor::matrix(rows, cols, data)?, op, rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::shape("concat_cols", format!("height {r} vs {rows}")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::ConcatCols(parts.iter().map(|p| p.0).collect());
        self.push(Tensor::matrix(rows, cols, data)?, op, rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {r} rows", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a.0, start), rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c} cols", start + len)));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a.0, start), rg, "slice_cols")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::RowSoftmax(a.0), rg, "row_softmax")
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * x + beta`
    /// with `gamma` and `beta` given as 1×c rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(gamma).dims2() != (1, c) || self.value(beta).dims2() != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let n = S::lit(c as f64);
        let eps = S::lit(LN_EPS);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rstd = S::one() / (var + eps).sqrt();
            inv_std.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rstd;
                normalized.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            normalized,
            inv_std,
        };
        self.push(Tensor::matrix(r, c, out)?, op, rg, "layer_norm")
    }

    /// GeLU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::Gelu(a.0), rg, "gelu")
    }

    /// Row-wise cosine similarity, returned as an n×1 column. `a` is either n×d
    /// or a single row broadcast against every row of `b`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if ca != cb || (ra != rb && ra != 1) {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let eps = S::lit(NORM_EPS);
        let va = self.value(a);
        let vb = self.value(b);
        let data = (0..rb)
            .map(|i| {
                let x = va.row_slice(if ra == 1 { 0 } else { i });
                let y = vb.row_slice(i);
                dot(x, y) / ((norm(x) + eps) * (norm(y) + eps))
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(rb, 1, data)?, Op::CosineSim(a.0, b.0), rg, "cosine_sim")
    }

    /// `x / (|x| + eps)` per row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let eps = S::lit(NORM_EPS);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let d = norm(row) + eps;
            for x in row.iter_mut() {
                *x /= d;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::NormalizeRows(a.0), rg, "normalize_rows")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<S>() / S::lit(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg, "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg, "sum")
    }

    /// Picks one element (flat row-major index) as a 1×1 scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.numel() {
            return Err(Error::shape("select", format!("index {index} of {:?}", v.shape())));
        }
        let x = v.data()[index];
        let rg = self.rg(a);
        self.push(Tensor::scalar(x), Op::Select(a.0, index), rg, "select")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::Log(a.0), rg, "log")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| -x).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::Neg(a.0), rg, "neg")
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: S) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| x.max(lo)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data)?, Op::ClampMin(a.0, lo), rg, "clamp_min")
    }

    /// Linear layer helper: `x · w + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads, tape_len: self.nodes.len() });
        }
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, tape_len: self.nodes.len() })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], p: usize, contrib: Vec<S>) {
        if !self.nodes[p].requires_grad {
            return;
        }
        match &mut grads[p] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |p: usize| &self.nodes[p].value;
        let wants = |p: usize| self.nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = val(a).dims2();
                let m = val(b).cols();
                if wants(a) {
                    let bt = transpose_raw(val(b).data(), k, m);
                    self.accumulate(grads, a, matmul_raw(g, &bt, n, m, k));
                }
                if wants(b) {
                    let at = transpose_raw(val(a).data(), n, k);
                    self.accumulate(grads, b, matmul_raw(&at, g, k, n, m));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = val(a).dims2();
                self.accumulate(grads, a, transpose_raw(g, c, r));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::AddRow(x, row) => {
                let c = val(row).cols();
                if wants(row) {
                    let mut acc = vec![S::zero(); c];
                    for chunk in g.chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, row, acc);
                }
                self.accumulate(grads, x, g.to_vec());
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.iter().map(|&v| v * s).collect()),
            &Op::Shift(a) => self.accumulate(grads, a, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| val(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2();
                    if wants(p) {
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * total + off..i * total + off + c]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    off += c;
                }
            }
            &Op::SliceRows(a, start) => {
                let (_, c) = val(a).dims2();
                let mut full = vec![S::zero(); val(a).numel()];
                full[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, a, full);
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = val(a).dims2();
                let len = g.len() / r;
                let mut full = vec![S::zero(); r * c];
                for i in 0..r {
                    full[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, a, full);
            }
            &Op::RowSoftmax(a) => {
                let c = val(a).cols();
                let y = node.value.data();
                let mut out = vec![S::zero(); y.len()];
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, a, out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = val(x).cols();
                let gam = val(gamma).data();
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                    self.accumulate(grads, beta, db);
                }
                if wants(x) {
                    let n = S::lit(c as f64);
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in g.chunks(c).zip(normalized.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                        let dh: Vec<S> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<S>() / n;
                        let mean_dh_h = dot(&dh, hr) / n;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Gelu(a) => {
                let out = val(a).data().iter().zip(g).map(|(&x, &gv)| gv * gelu_grad(x)).collect();
                self.accumulate(grads, a, out);
            }
            &Op::CosineSim(a, b) => {
                let eps = S::lit(NORM_EPS);
                let (ra, c) = val(a).dims2();
                let rb = val(b).rows();
                let mut da = vec![S::zero(); ra * c];
                let mut db = vec![S::zero(); rb * c];
                for i in 0..rb {
                    let ai = if ra == 1 { 0 } else { i };
                    let x = val(a).row_slice(ai);
                    let y = val(b).row_slice(i);
                    let (nx, ny) = (norm(x), norm(y));
                    let denom = (nx + eps) * (ny + eps);
                    let cos = node.value.data()[i];
                    let gi = g[i];
                    // d cos / dx = y / denom - cos * x / (|x| (|x| + eps))
                    let kx = if nx > S::zero() { cos / (nx * (nx + eps)) } else { S::zero() };
                    let ky = if ny > S::zero() { cos / (ny * (ny + eps)) } else { S::zero() };
                    for j in 0..c {
                        da[ai * c + j] += gi * (y[j] / denom - kx * x[j]);
                        db[i * c + j] += gi * (x[j] / denom - ky * y[j]);
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            &Op::NormalizeRows(a) => {
                let eps = S::lit(NORM_EPS);
                let c = val(a).cols();
                let mut out = vec![S::zero(); g.len()];
                for ((xr, gr), or) in val(a).data().chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                    let n = norm(xr);
                    let d = n + eps;
                    let k = if n > S::zero() { dot(xr, gr) / (n * d * d) } else { S::zero() };
                    for j in 0..c {
                        or[j] = gr[j] / d - k * xr[j];
                    }
                }
                self.accumulate(grads, a, out);
            }
            &Op::Mean(a) => {
                let n = val(a).numel();
                let v = g[0] / S::lit(n as f64);
                self.accumulate(grads, a, vec![v; n]);
            }
            &Op::Sum(a) => {
                let n = val(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Select(a, idx) => {
                let mut full = vec![S::zero(); val(a).numel()];
                full[idx] = g[0];
                self.accumulate(grads, a, full);
            }
            &Op::Log(a) => {
                let out = val(a).data().iter().zip(g).map(|(&x, &gv)| gv / x).collect();
                self.accumulate(grads, a, out);
            }
            &Op::Neg(a) => self.accumulate(grads, a, g.iter().map(|&v| -v).collect()),
            &Op::ClampMin(a, lo) => {
                let out = val(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > lo { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, a, out);
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients of every trainable leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    tape_len: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Raw gradient buffer, `None` when the node was not reached.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the leaf's value; zeros for unreachable leaves.
    pub fn wrt(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        debug_assert_eq!(tape.len(), self.tape_len);
        let value = tape.value(v);
        match self.get(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(value.shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = tape.constant(t(2, 1, &[3.0, 4.0])).unwrap();
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        assert_eq!(tape.value(y).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 3, &[0.0; 6])).unwrap();
        let b = tape.constant(t(2, 3, &[0.0; 6])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
    }

    #[test]
    fn non_finite_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.constant(t(1, 2, &[1.0, f64::NAN])),
            Err(Error::NonFinite { op: "leaf" })
        ));
        let z = tape.constant(t(1, 1, &[0.0])).unwrap();
        assert!(matches!(tape.log(z), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_self_is_one() {
        let mut tape = Tape::new();
        let v = tape.constant(t(1, 3, &[0.3, -2.0, 1.5])).unwrap();
        let c = tape.cosine_sim(v, v).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_vector_is_guarded() {
        let mut tape = Tape::new();
        let z = tape.param(t(1, 2, &[0.0, 0.0])).unwrap();
        let v = tape.constant(t(1, 2, &[1.0, 0.0])).unwrap();
        let c = tape.cosine_sim(z, v).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(&tape, z).is_finite());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 4, &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0])).unwrap();
        let dead = tape.param(t(2, 2, &[1.0; 4])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(dead).is_none());
        assert_eq!(g.wrt(&tape, dead).data(), &[0.0; 4]);
    }

    #[test]
    fn apply_dispatches_by_kind() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, 2.0])).unwrap();
        let y = tape.apply(OpKind::Scale, &[x], 3.0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0]);
        assert!(tape.apply(OpKind::Add, &[x], 0.0).is_err());
    }

    #[test]
    fn topological_order_holds() {
        let mut tape = Tape::new();
        let a = tape.param(t(1, 2, &[1.0, 2.0])).unwrap();
        let b = tape.neg(a).unwrap();
        let c = tape.add(a, b).unwrap();
        assert!(a.index() < b.index() && b.index() < c.index());
    }
}
