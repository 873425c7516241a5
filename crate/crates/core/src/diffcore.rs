//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Every op appends a node to a [`Tape`]; [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates gradients for the [`Parameter`]s the
//! loss depends on. All values are `f64`. Vectors are `1 x n` rows.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("dropout rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("duplicate parameter id {0:?}")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Row-major dense array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::ShapeMismatch { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::ShapeMismatch { op: "from_rows", left: vec![cols], right: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(DiffError::ShapeMismatch { op, left: self.shape.clone(), right: vec![0, 0] }),
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters enter the tape as constants.
    pub trainable: bool,
}

/// Named parameters in registration order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, trainable: true });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

/// One gradient array per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients { slots: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0]
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.data.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.slots.iter_mut().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots.iter().flat_map(|s| s.data.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (i, s) in self.slots.iter().enumerate() {
            if !s.is_finite() {
                return Err(DiffError::NonFiniteGradient(store.params[i].name.clone()));
            }
        }
        Ok(())
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// An op whose forward value is computed outside the tape.
///
/// `backward` receives the upstream gradient of the output and returns one
/// gradient per input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize, usize),
    Gather(Var, Vec<usize>),
    LogSumExp(Var, Axis),
    Sum(Var),
    Dropout(Var, Tensor),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Record of executed ops, confined to one thread.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch { op, left: a.shape.clone(), right: b.shape.clone() }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFiniteValue { op: name });
        }
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, false, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.params.get(id).trainable;
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data: out }, needs, "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: ta.shape.clone(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), t, needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), t, needs, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), t, needs, "mul")
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = ta.dims2("add_row")?;
        if tb.shape != [1, n] {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let t = Tensor { shape: ta.shape.clone(), data };
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddRow(a, bias), t, needs, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x * c).collect() };
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), t, needs, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x.tanh()).collect() };
        let needs = self.needs(a);
        self.push(Op::Tanh(a), t, needs, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| sigmoid(x)).collect() };
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), t, needs, "sigmoid")
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first =
            self.value(*parts.first().ok_or(DiffError::ShapeMismatch { op: "concat", left: vec![], right: vec![] })?);
        let (r0, c0) = first.dims2("concat")?;
        let t = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2("concat")?;
                    if c != c0 {
                        return Err(mismatch("concat", first, t));
                    }
                    rows += r;
                    data.extend_from_slice(&t.data);
                }
                Tensor { shape: vec![rows, c0], data }
            }
            Axis::Cols => {
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2("concat")?;
                    if r != r0 {
                        return Err(mismatch("concat", first, t));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r0 * total);
                for row in 0..r0 {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data[row * w..(row + 1) * w]);
                    }
                }
                Tensor { shape: vec![r0, total], data }
            }
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::Concat(parts.to_vec(), axis), t, needs, "concat")
    }

    /// Rows or columns `start..end`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("slice")?;
        let extent = if axis == Axis::Rows { r } else { c };
        if start >= end || end > extent {
            return Err(DiffError::OutOfRange { op: "slice", index: end, extent });
        }
        let t = match axis {
            Axis::Rows => Tensor { shape: vec![end - start, c], data: ta.data[start * c..end * c].to_vec() },
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (end - start));
                for row in ta.data.chunks(c) {
                    data.extend_from_slice(&row[start..end]);
                }
                Tensor { shape: vec![r, end - start], data }
            }
        };
        let needs = self.needs(a);
        self.push(Op::Slice(a, axis, start, end), t, needs, "slice")
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = tt.dims2("gather")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(DiffError::OutOfRange { op: "gather", index: i, extent: r });
            }
            data.extend_from_slice(&tt.data[i * c..(i + 1) * c]);
        }
        let t = Tensor { shape: vec![rows.len(), c], data };
        let needs = self.needs(table);
        self.push(Op::Gather(table, rows.to_vec()), t, needs, "gather")
    }

    /// Stable `log Σ exp` along `axis`, keeping the reduced axis with extent 1.
    pub fn log_sum_exp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("log_sum_exp")?;
        let t = match axis {
            Axis::Cols => {
                let data = ta.data.chunks(c).map(log_sum_exp).collect();
                Tensor { shape: vec![r, 1], data }
            }
            Axis::Rows => {
                let data = (0..c).map(|j| log_sum_exp_iter((0..r).map(|i| ta.data[i * c + j]))).collect();
                Tensor { shape: vec![1, c], data }
            }
        };
        let needs = self.needs(a);
        self.push(Op::LogSumExp(a, axis), t, needs, "log_sum_exp")
    }

    /// Sum of all elements as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs, "sum")
    }

    /// Inverted dropout. Identity (same node) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::BadRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).shape(), rate, rng)?;
        let t = self.value(a).data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
        let t = Tensor { shape: mask.shape.clone(), data: t };
        let needs = self.needs(a);
        self.push(Op::Dropout(a, mask), t, needs, "dropout")
    }

    /// Records an op whose forward `output` the caller already computed.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let name = op.name();
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Op::Custom(inputs.to_vec(), op), output, needs, name)
    }

    /// Gradients of the scalar `loss` for every parameter; unreachable ones are zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        grads.check_finite(self.params)?;
        Ok(grads)
    }

    /// Accumulates `scale * d(loss)/d(param)` into `grads`.
    pub fn backward_into(&self, loss: Var, scale: f64, grads: &mut Gradients) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NotScalar(lv.shape.clone()));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(());
        }
        node_grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![scale] });

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = Accumulator { tape: self, node_grads: &mut node_grads, grads: &mut *grads };
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = tb.shape[1];
                    if let Some(da) = acc.slot(*a) {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data[p * n..(p + 1) * n];
                                da[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if let Some(db) = acc.slot(*b) {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ta.data[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc.add_from(*a, &g.data);
                    acc.add_from(*b, &g.data);
                }
                Op::Sub(a, b) => {
                    acc.add_from(*a, &g.data);
                    if let Some(db) = acc.slot(*b) {
                        for (d, gv) in db.iter_mut().zip(&g.data) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if let Some(da) = acc.slot(*a) {
                        for ((d, gv), bv) in da.iter_mut().zip(&g.data).zip(&tb.data) {
                            *d += gv * bv;
                        }
                    }
                    if let Some(db) = acc.slot(*b) {
                        for ((d, gv), av) in db.iter_mut().zip(&g.data).zip(&ta.data) {
                            *d += gv * av;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    acc.add_from(*a, &g.data);
                    let n = self.value(*bias).numel();
                    if let Some(db) = acc.slot(*bias) {
                        for row in g.data.chunks(n) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = acc.slot(*a) {
                        for (d, gv) in da.iter_mut().zip(&g.data) {
                            *d += c * gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("op value");
                    if let Some(da) = acc.slot(*a) {
                        for ((d, gv), yv) in da.iter_mut().zip(&g.data).zip(&y.data) {
                            *d += gv * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("op value");
                    if let Some(da) = acc.slot(*a) {
                        for ((d, gv), yv) in da.iter_mut().zip(&g.data).zip(&y.data) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Concat(parts, axis) => {
                    let total_cols = g.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = (self.value(p).shape[0], self.value(p).shape[1]);
                        if let Some(dp) = acc.slot(p) {
                            match axis {
                                Axis::Rows => {
                                    for (d, gv) in dp.iter_mut().zip(&g.data[offset * c..(offset + r) * c]) {
                                        *d += gv;
                                    }
                                }
                                Axis::Cols => {
                                    for row in 0..r {
                                        let src = &g.data[row * total_cols + offset..row * total_cols + offset + c];
                                        for (d, gv) in dp[row * c..(row + 1) * c].iter_mut().zip(src) {
                                            *d += gv;
                                        }
                                    }
                                }
                            }
                        }
                        offset += if *axis == Axis::Rows { r } else { c };
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let c = self.value(*a).shape[1];
                    if let Some(da) = acc.slot(*a) {
                        match axis {
                            Axis::Rows => {
                                for (d, gv) in da[start * c..end * c].iter_mut().zip(&g.data) {
                                    *d += gv;
                                }
                            }
                            Axis::Cols => {
                                let w = end - start;
                                for (row, grow) in g.data.chunks(w).enumerate() {
                                    for (d, gv) in da[row * c + start..row * c + end].iter_mut().zip(grow) {
                                        *d += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gather(table, rows) => {
                    let c = self.value(*table).shape[1];
                    if let Some(dt) = acc.slot(*table) {
                        for (k, &r) in rows.iter().enumerate() {
                            for (d, gv) in dt[r * c..(r + 1) * c].iter_mut().zip(&g.data[k * c..(k + 1) * c]) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::LogSumExp(a, axis) => {
                    let ta = self.value(*a);
                    let y = node.value.as_ref().expect("op value");
                    let c = ta.shape[1];
                    if let Some(da) = acc.slot(*a) {
                        for (idx, d) in da.iter_mut().enumerate() {
                            let (i, j) = (idx / c, idx % c);
                            let k = if *axis == Axis::Cols { i } else { j };
                            *d += g.data[k] * (ta.data[idx] - y.data[k]).exp();
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    if let Some(da) = acc.slot(*a) {
                        for d in da.iter_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    if let Some(da) = acc.slot(*a) {
                        for ((d, gv), m) in da.iter_mut().zip(&g.data).zip(&mask.data) {
                            *d += gv * m;
                        }
                    }
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let y = node.value.as_ref().expect("op value");
                    let local = op.backward(&values, y, &g);
                    for (&v, lg) in inputs.iter().zip(&local) {
                        acc.add_from(v, &lg.data);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Resolves where an input's gradient goes: a parameter slot or an
/// intermediate buffer.
struct Accumulator<'a, 'p> {
    tape: &'a Tape<'p>,
    node_grads: &'a mut Vec<Option<Tensor>>,
    grads: &'a mut Gradients,
}

impl Accumulator<'_, '_> {
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.tape.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        if let Op::Param(id) = node.op {
            return Some(&mut self.grads.slots[id.0].data);
        }
        let shape = node.value.as_ref().expect("op value").shape();
        Some(&mut self.node_grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data)
    }

    fn add_from(&mut self, v: Var, g: &[f64]) {
        if let Some(d) = self.slot(v) {
            for (x, y) in d.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(xs)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    log_sum_exp_iter(xs.iter().copied())
}

pub fn log_sum_exp_iter<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mask of `0` or `1 / (1 - rate)` entries.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DiffError::BadRate(rate));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..shape.iter().product::<usize>()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    Tensor::new(shape.to_vec(), data)
}

/// The generator behind every stochastic op: ChaCha8 seeded through
/// `SeedableRng::seed_from_u64`.
pub type DetRng = ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 42;

pub fn seeded_rng(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream coordinates (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut h = seed;
    for &s in stream {
        h = splitmix(h ^ splitmix(s.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Coordinates below this magnitude are compared absolutely in
/// [`grad_check`]; central differences carry roughly `1e-16 |f| / eps`
/// of rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central finite differences over
/// every trainable coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    let mut work = params.clone();
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        for idx in 0..p.value.numel() {
            let orig = p.value.data[idx];
            work.get_mut(id).value.data[idx] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data[idx] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = p.name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// Uniform Glorot initialization for a `fan_in x fan_out` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor { shape: vec![rows, cols], data }
}
