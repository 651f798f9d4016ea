//! Tape-based reverse-mode differentiation over dense 2-D f64 matrices.
//!
//! A [`Tape`] records one forward pass. Trainable tensors live in a
//! [`ParamStore`]; [`Tape::backward`] accumulates into their gradients. The
//! tape is append-only, so every node's inputs precede it and the graph is
//! acyclic by construction.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn from_rows3(rows: &[[f64; 3]]) -> Self {
        Self { rows: rows.len(), cols: 3, data: rows.iter().flatten().copied().collect() }
    }

    pub fn to_rows3(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.cols, 3);
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul inner dimensions");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
    }

    fn add_assign(&mut self, b: &Mat) {
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotary angle for channel pair `k` of a group of width `group`.
pub fn rotary_frequency(k: usize, group: usize) -> f64 {
    10000f64.powf(-2.0 * k as f64 / group as f64)
}

/// Rotates each channel pair of each row by `sign · position · frequency`.
/// Channels are split into consecutive groups of width `group` that share
/// the frequency ladder (one group per attention head).
pub fn rotary_apply(x: &Mat, positions: &[f64], group: usize, sign: f64) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        for g0 in (0..x.cols).step_by(group) {
            for k in 0..group / 2 {
                let theta = sign * positions[r] * rotary_frequency(k, group);
                let (s, c) = theta.sin_cos();
                let i = r * x.cols + g0 + 2 * k;
                let (a, b) = (x.data[i], x.data[i + 1]);
                out.data[i] = a * c - b * s;
                out.data[i + 1] = a * s + b * c;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    L1Mean(Var),
    SqL2(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Rotary(Var, Vec<f64>, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Mat,
    pub grad: Option<Mat>,
    pub m: Mat,
    pub v: Mat,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Parameter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Parameter { name: name.into(), value, grad: None, m: Mat::zeros(r, c), v: Mat::zeros(r, c) });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Mat::zeros(p.value.rows, p.value.cols));
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter_map(|p| p.grad.as_ref()).map(Mat::norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their joint norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let f = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data.iter_mut().for_each(|x| *x *= f);
            }
        }
        norm
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Adjoints of every tape node from one backward pass.
pub struct Gradients {
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adj[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    /// A constant: receives no parameter gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.params[id.0].value.clone(), Op::Param(id.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row shape");
        let mut v = self.value(a).clone();
        let rv = &self.nodes[row.0].value.data;
        for i in 0..r {
            for j in 0..c {
                v.data[i * c + j] += rv[j];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×C row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: row shape");
        let mut v = self.value(a).clone();
        let rv = &self.nodes[row.0].value.data;
        for i in 0..r {
            for j in 0..c {
                v.data[i * c + j] *= rv[j];
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a))
    }

    /// Multiplies `a` by a 1×1 variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: scalar shape");
        let k = self.scalar_value(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "add_scalar: scalar shape");
        let k = self.scalar_value(s);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.data.iter().sum::<f64>() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..m.rows {
            let row = &mut v.data[r * m.cols..(r + 1) * m.cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)`, no affine part.
    pub fn layernorm_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows);
        for r in 0..m.rows {
            let row = &mut v.data[r * m.cols..(r + 1) * m.cols];
            let n = m.cols as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNormRows(a, inv_std))
    }

    /// Mean absolute value over all elements.
    pub fn l1_mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.data.iter().map(|x| x.abs()).sum::<f64>() / m.len() as f64);
        self.push(v, Op::L1Mean(a))
    }

    /// Sum of squares over all elements.
    pub fn sq_l2(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).norm_sq());
        self.push(v, Op::SqL2(a))
    }

    /// Selects rows by index; indices are constants (no gradient flows to them).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(idx.len(), m.cols);
        for (o, &i) in idx.iter().enumerate() {
            v.data[o * m.cols..(o + 1) * m.cols].copy_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                v.data[r * cols + c0..r * cols + c0 + m.cols].copy_from_slice(&m.data[r * m.cols..(r + 1) * m.cols]);
            }
            c0 += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.rows, "slice_rows out of range");
        let v = Mat { rows: end - start, cols: m.cols, data: m.data[start * m.cols..end * m.cols].to_vec() };
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.cols, "slice_cols out of range");
        let w = end - start;
        let mut v = Mat::zeros(m.rows, w);
        for r in 0..m.rows {
            v.data[r * w..(r + 1) * w].copy_from_slice(&m.data[r * m.cols + start..r * m.cols + end]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn rotary(&mut self, a: Var, positions: &[f64], group: usize) -> Var {
        let m = self.value(a);
        assert_eq!(positions.len(), m.rows, "rotary: one position per row");
        assert!(group % 2 == 0 && m.cols % group == 0, "rotary: group must be even and divide the width");
        let v = rotary_apply(m, positions, group, 1.0);
        self.push(v, Op::Rotary(a, positions.to_vec(), group))
    }

    /// Reverse sweep from a 1×1 root. Parameter gradients are accumulated
    /// into `store`; node adjoints are returned.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot(r, c));
        }
        for p in &mut store.params {
            if p.grad.is_none() {
                p.grad = Some(Mat::zeros(p.value.rows, p.value.cols));
            }
        }
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj, store);
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| match &mut adj[v.0] {
            Some(a) => a.add_assign(&d),
            slot => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                store.params[*p].grad.as_mut().expect("grad allocated").add_assign(g);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(val(*b), |x, y| x * y));
                acc(*b, g.zip(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.zip(bv, |x, y| x / y));
                let mut d = g.clone();
                for k in 0..d.len() {
                    d.data[k] *= -av.data[k] / (bv.data[k] * bv.data[k]);
                }
                acc(*b, d);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut d = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        d.data[c] += g.data[r * g.cols + c];
                    }
                }
                acc(*row, d);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let mut da = g.clone();
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let k = r * g.cols + c;
                        da.data[k] *= rv.data[c];
                        dr.data[c] += g.data[k] * av.data[k];
                    }
                }
                acc(*a, da);
                acc(*row, dr);
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let k = val(*s).data[0];
                acc(*a, g.map(|x| x * k));
                let d: f64 = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                acc(*s, Mat::scalar(d));
            }
            Op::AddScalar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Mat::scalar(g.data.iter().sum()));
            }
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose()));
                acc(*b, val(*a).transpose().matmul(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Mat::filled(r, c, g.data[0]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Mat::filled(r, c, g.data[0] / (r * c) as f64));
            }
            Op::Relu(a) => acc(*a, g.zip(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip(val(*a), |x, y| x * sigmoid(y))),
            Op::Exp(a) => acc(*a, g.zip(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip(val(*a), |x, y| x / y)),
            Op::Abs(a) => acc(*a, g.zip(val(*a), |x, y| x * sign(y))),
            Op::Square(a) => acc(*a, g.zip(val(*a), |x, y| 2.0 * x * y)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = r * y.cols..(r + 1) * y.cols;
                    let dot: f64 = g.data[s.clone()].iter().zip(&y.data[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        d.data[k] = y.data[k] * (g.data[k] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a, inv_std) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = r * y.cols..(r + 1) * y.cols;
                    let gm = g.data[s.clone()].iter().sum::<f64>() / n;
                    let gy = g.data[s.clone()].iter().zip(&y.data[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / n;
                    for k in s {
                        d.data[k] = inv_std[r] * (g.data[k] - gm - y.data[k] * gy);
                    }
                }
                acc(*a, d);
            }
            Op::L1Mean(a) => {
                let av = val(*a);
                let k = g.data[0] / av.len() as f64;
                acc(*a, av.map(|y| k * sign(y)));
            }
            Op::SqL2(a) => {
                let k = 2.0 * g.data[0];
                acc(*a, val(*a).map(|y| k * y));
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.rows, av.cols);
                for (o, &r) in idx.iter().enumerate() {
                    for c in 0..av.cols {
                        d.data[r * av.cols + c] += g.data[o * av.cols + c];
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    acc(p, Mat { rows: r, cols: c, data: g.data[r0 * c..(r0 + r) * c].to_vec() });
                    r0 += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut d = Mat::zeros(r, c);
                    for row in 0..r {
                        d.data[row * c..(row + 1) * c].copy_from_slice(&g.data[row * g.cols + c0..row * g.cols + c0 + c]);
                    }
                    acc(p, d);
                    c0 += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                d.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                for row in 0..r {
                    d.data[row * c + start..row * c + start + g.cols].copy_from_slice(&g.data[row * g.cols..(row + 1) * g.cols]);
                }
                acc(*a, d);
            }
            Op::Rotary(a, pos, group) => acc(*a, rotary_apply(g, pos, *group, -1.0)),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, weight_decay: 0.05, eps: 1e-8 }
    }
}

/// One AdamW update with bias correction; `step` counts from 1.
pub fn adamw_step(store: &mut ParamStore, lr: f64, opt: &AdamW, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidInput("adamw step count starts at 1".into()));
    }
    let bc1 = 1.0 - opt.beta1.powi(step as i32);
    let bc2 = 1.0 - opt.beta2.powi(step as i32);
    for p in &mut store.params {
        let g = p.grad.as_ref().ok_or_else(|| Error::InvalidInput(format!("parameter `{}` has no gradient", p.name)))?;
        for k in 0..p.value.len() {
            let gk = g.data[k];
            p.m.data[k] = opt.beta1 * p.m.data[k] + (1.0 - opt.beta1) * gk;
            p.v.data[k] = opt.beta2 * p.v.data[k] + (1.0 - opt.beta2) * gk * gk;
            let mhat = p.m.data[k] / bc1;
            let vhat = p.v.data[k] / bc2;
            let x = p.value.data[k];
            p.value.data[k] = x - lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * x);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to `floor · base`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

// ---------------------------------------------------------------------------
// Finite-difference checking

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-3, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates where one-sided differences disagree (kinks, ties).
    pub non_smooth: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub tol: f64,
    pub passed: bool,
}

const REFINEMENTS: usize = 2;

/// Compares backward gradients of `f` with central differences over the
/// parameters in `store`. `f` must add the parameters to the tape itself.
pub fn grad_check<F>(store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let root = f(&mut tape, &work)?;
    let f0 = tape.scalar_value(root);
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check base evaluation".into()));
    }
    tape.backward(root, &mut work)?;
    let analytic: Vec<Mat> = work.params.iter().map(|p| p.grad.clone().expect("allocated")).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, s)?;
        let v = t.scalar_value(r);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check perturbed evaluation".into()))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let floor = 1e-6 * f0.abs().max(1.0);
    let mut report = GradCheckReport { checked: 0, non_smooth: 0, max_rel_error: 0.0, worst: None, tol: cfg.tol, passed: true };
    for pi in 0..work.params.len() {
        let n = work.params[pi].value.len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let x = work.params[pi].value.data[k];
            let h = cfg.h * x.abs().max(1.0);
            work.params[pi].value.data[k] = x + h;
            let fp = eval(&work)?;
            work.params[pi].value.data[k] = x - h;
            let fm = eval(&work)?;
            work.params[pi].value.data[k] = x;
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let scale = fwd.abs().max(bwd.abs()).max(floor);
            // one-sided slopes agree to O(h) on smooth functions
            if (fwd - bwd).abs() > 0.1 * scale + 100.0 * f64::EPSILON * f0.abs().max(1.0) / h {
                report.non_smooth += 1;
                continue;
            }
            let a = analytic[pi].data[k];
            let rel_to = |d: f64| (a - d).abs() / a.abs().max(d.abs()).max(floor);
            let mut numeric = (fp - fm) / (2.0 * h);
            // a mismatch counts only once the estimate has converged under step
            // refinement; estimates that keep moving straddle a kink or a jump
            let mut step = h;
            let mut converged = rel_to(numeric) <= cfg.tol;
            for _ in 0..REFINEMENTS {
                if converged {
                    break;
                }
                step /= 10.0;
                work.params[pi].value.data[k] = x + step;
                let fp = eval(&work)?;
                work.params[pi].value.data[k] = x - step;
                let fm = eval(&work)?;
                work.params[pi].value.data[k] = x;
                let finer = (fp - fm) / (2.0 * step);
                let agree = (finer - numeric).abs() <= cfg.tol * finer.abs().max(numeric.abs()).max(floor);
                numeric = finer;
                converged = agree || rel_to(numeric) <= cfg.tol;
            }
            if !converged {
                report.non_smooth += 1;
                continue;
            }
            let rel = rel_to(numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordError { param: work.params[pi].name.clone(), index: k, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat { rows: r, cols: c, data: (0..r * c).map(|_| StandardNormal.sample(rng)).collect() }
    }

    fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        let mut m = rand_mat(rng, r, c);
        for x in &mut m.data {
            if x.abs() < 1e-2 {
                *x = if *x < 0.0 { -0.5 } else { 0.5 };
            }
        }
        m
    }

    #[test]
    fn square_derivative() {
        let mut s = ParamStore::new();
        let x = s.add("x", Mat::scalar(3.0));
        let mut t = Tape::new();
        let v = t.param(&s, x);
        let y = t.square(v);
        t.backward(y, &mut s).unwrap();
        assert_eq!(s.get(x).grad.as_ref().unwrap().data[0], 6.0);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let mut s = ParamStore::new();
        let x = s.add("x", Mat::scalar(0.0));
        let mut t = Tape::new();
        let v = t.param(&s, x);
        let y = t.softplus(v);
        assert!((t.scalar_value(y) - 2f64.ln()).abs() < 1e-15);
        t.backward(y, &mut s).unwrap();
        assert_eq!(s.get(x).grad.as_ref().unwrap().data[0], 0.5);
    }

    #[test]
    fn non_scalar_root_errors() {
        let mut s = ParamStore::new();
        let mut t = Tape::new();
        let v = t.constant(Mat::zeros(2, 2));
        assert!(matches!(t.backward(v, &mut s), Err(Error::NonScalarRoot(2, 2))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut s = ParamStore::new();
        let x = s.add("x", Mat::scalar(2.0));
        let mut t = Tape::new();
        let v = t.param(&s, x);
        let y = t.square(v);
        t.backward(y, &mut s).unwrap();
        t.backward(y, &mut s).unwrap();
        assert_eq!(s.get(x).grad.as_ref().unwrap().data[0], 8.0);
    }

    #[test]
    fn three_layer_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let x = rand_mat(&mut rng, 4, 5);
        let w1 = s.add("w1", rand_mat(&mut rng, 5, 6));
        let w2 = s.add("w2", rand_mat(&mut rng, 6, 6));
        let w3 = s.add("w3", rand_mat(&mut rng, 6, 1));
        let f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let x = t.constant(x.clone());
            let a = t.param(s, w1);
            let b = t.param(s, w2);
            let c = t.param(s, w3);
            let h = t.matmul(x, a);
            let h = t.relu(h);
            let h = t.matmul(h, b);
            let h = t.relu(h);
            let h = t.matmul(h, c);
            Ok(t.sum(h))
        };
        let r = grad_check(&s, f, &GradCheckConfig { h: 1e-4, tol: 1e-4, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.checked > 50);
    }

    type Unary = fn(&mut Tape, Var) -> Var;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let unary: Vec<(&str, Unary)> = vec![
            ("relu", |t, a| t.relu(a)),
            ("softplus", |t, a| t.softplus(a)),
            ("exp", |t, a| t.exp(a)),
            ("log", |t, a| {
                let s = t.square(a);
                let s = t.offset(s, 0.1);
                t.log(s)
            }),
            ("abs", |t, a| t.abs(a)),
            ("square", |t, a| t.square(a)),
            ("softmax", |t, a| t.softmax_rows(a)),
            ("layernorm", |t, a| t.layernorm_rows(a, 1e-5)),
            ("transpose", |t, a| t.transpose(a)),
            ("scale", |t, a| t.scale(a, -1.7)),
            ("slice_rows", |t, a| t.slice_rows(a, 1, 3)),
            ("slice_cols", |t, a| t.slice_cols(a, 1, 3)),
            ("gather", |t, a| t.gather_rows(a, &[2, 0, 2])),
            ("rotary", |t, a| t.rotary(a, &[0.0, 1.0, 2.5], 2)),
            ("concat", |t, a| {
                let b = t.square(a);
                let r = t.concat_rows(&[a, b]);
                let c = t.concat_cols(&[r, r]);
                t.slice_cols(c, 0, 7)
            }),
            ("mean", |t, a| t.mean(a)),
            ("l1", |t, a| t.l1_mean(a)),
            ("sq_l2", |t, a| t.sq_l2(a)),
        ];
        let binary: Vec<(&str, fn(&mut Tape, Var, Var) -> Var)> = vec![
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| {
                let d = t.square(b);
                let d = t.offset(d, 0.5);
                t.div(a, d)
            }),
            ("matmul", |t, a, b| {
                let bt = t.transpose(b);
                t.matmul(a, bt)
            }),
            ("add_row", |t, a, b| {
                let r = t.slice_rows(b, 0, 1);
                t.add_row(a, r)
            }),
            ("mul_row", |t, a, b| {
                let r = t.slice_rows(b, 1, 2);
                t.mul_row(a, r)
            }),
            ("mul_scalar", |t, a, b| {
                let r = t.slice_rows(b, 0, 1);
                let s = t.slice_cols(r, 2, 3);
                t.mul_scalar(a, s)
            }),
            ("add_scalar", |t, a, b| {
                let r = t.slice_rows(b, 2, 3);
                let s = t.slice_cols(r, 1, 2);
                t.add_scalar(a, s)
            }),
        ];
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = rand_mat(&mut rng, 3, 4);
            let probe2 = rand_mat(&mut rng, 4, 3);
            let mut s = ParamStore::new();
            let a = s.add("a", away_from_zero(&mut rng, 3, 4));
            let b = s.add("b", away_from_zero(&mut rng, 3, 4));
            let project = |t: &mut Tape, y: Var| -> Var {
                // contract with a random probe so every output coordinate matters
                let (r, c) = t.value(y).shape();
                let p = if (r, c) == (3, 4) {
                    probe.clone()
                } else if (r, c) == (4, 3) {
                    probe2.clone()
                } else {
                    Mat { rows: r, cols: c, data: (0..r * c).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect() }
                };
                let p = t.constant(p);
                let m = t.mul(y, p);
                t.sum(m)
            };
            for (name, op) in &unary {
                let f = |t: &mut Tape, s: &ParamStore| {
                    let x = t.param(s, a);
                    let y = op(t, x);
                    Ok(project(t, y))
                };
                let r = grad_check(&s, f, &GradCheckConfig { h: 1e-6, tol: 1e-4, ..Default::default() }).unwrap();
                assert!(r.passed, "{name} seed {seed}: {r:?}");
            }
            for (name, op) in &binary {
                let f = |t: &mut Tape, s: &ParamStore| {
                    let x = t.param(s, a);
                    let y = t.param(s, b);
                    let z = op(t, x, y);
                    Ok(project(t, z))
                };
                let r = grad_check(&s, f, &GradCheckConfig { h: 1e-6, tol: 1e-4, ..Default::default() }).unwrap();
                assert!(r.passed, "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut s = ParamStore::new();
        s.add("x", Mat::row(&[0.0, 1.0]));
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let y = t.relu(x);
            Ok(t.sum(y))
        };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.non_smooth, 1);
        assert_eq!(r.checked, 1);
        assert!(r.passed);
    }

    #[test]
    fn shallow_kink_inside_stencil_is_refined() {
        let mut s = ParamStore::new();
        s.add("x", Mat::row(&[3e-6]));
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let y = t.relu(x);
            let z = t.scale(x, 100.0);
            let w = t.add(y, z);
            Ok(t.sum(w))
        };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn missing_gradient_path_fails() {
        let mut s = ParamStore::new();
        s.add("x", Mat::row(&[0.7, -1.3, 2.0]));
        // x ⊙ x with one factor detached: analytic x, true 2x
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let c = t.constant(s.params[0].value.clone());
            let y = t.mul(x, c);
            Ok(t.sum(y))
        };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.non_smooth, 0);
    }

    #[test]
    fn quadratic_form_passes_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 4, 4);
        let mut s = ParamStore::new();
        s.add("x", rand_mat(&mut rng, 4, 1));
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let q = t.constant(q.clone());
            let qx = t.matmul(q, x);
            let xt = t.transpose(x);
            Ok(t.matmul(xt, qx))
        };
        let r = grad_check(&s, f, &GradCheckConfig { tol: 1e-6, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn accumulation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let w = s.add("w", rand_mat(&mut rng, 3, 3));
        let run = |s: &mut ParamStore, a: f64, b: f64| {
            s.zero_grad();
            let mut t = Tape::new();
            let x = t.param(s, w);
            let f = t.sq_l2(x);
            let g0 = t.softplus(x);
            let g = t.sum(g0);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            let r = t.add(fa, gb);
            t.backward(r, s).unwrap();
            s.get(w).grad.clone().unwrap()
        };
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let both = run(&mut s, a, b);
        let f = run(&mut s, 1.0, 0.0);
        let g = run(&mut s, 0.0, 1.0);
        for k in 0..9 {
            assert!((both.data[k] - (a * f.data[k] + b * g.data[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn adamw_zero_grad_no_decay() {
        let mut s = ParamStore::new();
        s.add("x", Mat::row(&[1.5, -2.0]));
        s.zero_grad();
        let opt = AdamW { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, 0.1, &opt, 1).unwrap();
        assert_eq!(s.params[0].value.data, vec![1.5, -2.0]);
    }

    #[test]
    fn adamw_single_step_by_hand() {
        let mut s = ParamStore::new();
        s.add("x", Mat::scalar(1.0));
        s.params[0].grad = Some(Mat::scalar(0.5));
        let opt = AdamW::default();
        adamw_step(&mut s, 0.01, &opt, 1).unwrap();
        // m = 0.05, v = 0.0125; bias-corrected m̂ = 0.5, v̂ = 0.25
        let expect = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.05 * 1.0);
        assert!((s.params[0].value.data[0] - expect).abs() < 1e-15);
        assert!((s.params[0].m.data[0] - 0.05).abs() < 1e-15);
        assert!((s.params[0].v.data[0] - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_only() {
        let mut s = ParamStore::new();
        s.add("x", Mat::scalar(2.0));
        s.zero_grad();
        adamw_step(&mut s, 0.1, &AdamW::default(), 1).unwrap();
        assert!((s.params[0].value.data[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn adamw_requires_gradient() {
        let mut s = ParamStore::new();
        s.add("x", Mat::scalar(2.0));
        assert!(adamw_step(&mut s, 0.1, &AdamW::default(), 1).is_err());
    }

    #[test]
    fn adamw_is_deterministic() {
        let mut a = ParamStore::new();
        a.add("x", Mat::row(&[0.3, -0.1, 2.0]));
        a.params[0].grad = Some(Mat::row(&[0.1, 0.2, -0.3]));
        let mut b = a.clone();
        for step in 1..5 {
            adamw_step(&mut a, 0.01, &AdamW::default(), step).unwrap();
            adamw_step(&mut b, 0.01, &AdamW::default(), step).unwrap();
        }
        assert_eq!(a.params[0].value, b.params[0].value);
    }

    #[test]
    fn rotary_hand_rotation() {
        let x = Mat::row(&[1.0, 0.0]);
        let y = rotary_apply(&x, &[1.0], 2, 1.0);
        assert!((y.data[0] - 1f64.cos()).abs() < 1e-15);
        assert!((y.data[1] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        s.add("x", Mat::row(&[0.0, 0.0]));
        s.params[0].grad = Some(Mat::row(&[3.0, 4.0]));
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_shape() {
        assert!((cosine_lr(1.0, 0, 100, 10, 0.0) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 10, 100, 10, 0.0) - 1.0).abs() < 1e-15);
        assert!(cosine_lr(1.0, 99, 100, 10, 0.0) < 0.01);
    }
}
