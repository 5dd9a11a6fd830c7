//! Define-by-run operation tape.
//!
//! Every forward op pushes a [`Node`] holding its output buffer, a grad
//! buffer of the same shape, and enough of the op to replay it backward.
//! [`Tape::backward`] walks the node list in exact reverse execution
//! order; a tensor consumed by k ops receives the sum of k contributions.

use std::cell::RefCell;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: usize, b: usize },
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, a: usize, slope: f64 },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    /// `argmax` holds the winning flat index per output slot (first on ties).
    Max { a: usize, argmax: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Softmax { a: usize },
    GatherRow { src: usize, row: usize },
    AddScalarConst { a: usize },
    MulScalarConst { a: usize, factor: f64 },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
}

/// Recorded forward pass; single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Lightweight handle to a tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var<'_> {
        let grad = vec![0.0; data.len()];
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { data, shape, grad, op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Constant leaf; no gradient flows out of it.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf { param: None })
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![v], vec![1], Op::Leaf { param: None })
    }

    pub fn vector(&self, data: &[f64]) -> Var<'_> {
        self.push(data.to_vec(), vec![data.len()], Op::Leaf { param: None })
    }

    /// Trainable leaf: copies the current parameter value onto the tape and
    /// remembers the id so [`Tape::accumulate_param_grads`] can scatter back.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Var<'t> {
        let p = store.get(id);
        self.push(
            p.value.data.clone(),
            p.value.shape.clone(),
            Op::Leaf { param: Some(id) },
        )
    }

    /// Populate grads of every node reachable from `loss` (all recorded
    /// nodes are candidates; unreached ones keep zero grads).
    pub fn backward(&self, loss: Var<'_>) -> Result<(), DiffError> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &nodes[loss.idx];
            if l.data.len() != 1 {
                return Err(DiffError::NonScalarLoss { shape: l.shape.clone() });
            }
        }
        nodes[loss.idx].grad[0] += 1.0;
        for i in (0..=loss.idx).rev() {
            if nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop_node(&mut nodes, i);
        }
        Ok(())
    }

    /// Reset every node gradient to zero so the tape can be replayed.
    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for n in self.nodes.borrow().iter() {
            if let Op::Leaf { param: Some(id) } = n.op {
                let p = store.get_mut(id);
                for (g, ng) in p.grad.iter_mut().zip(&n.grad) {
                    *g += ng;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.idx].data.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].shape.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.idx].grad.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.idx].data.len(), 1);
        nodes[self.idx].data[0]
    }

    fn with<R>(&self, f: impl FnOnce(&[f64], &[usize]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.idx];
        f(&n.data, &n.shape)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a_data, a_shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        let (b_data, b_shape) = other.with(|d, s| (d.to_vec(), s.to_vec()));
        let (m, k) = as_2d(&a_shape, false);
        let (k2, n) = as_2d(&b_shape, true);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let out = matmul_raw(&a_data, m, k, &b_data, n);
        let out_shape = match (a_shape.len(), b_shape.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![1],
        };
        Ok(self.tape.push(out, out_shape, Op::Matmul { a: self.idx, b: other.idx }))
    }

    fn binary(self, other: Var<'t>, kind: BinKind, op: &'static str) -> Result<Var<'t>, DiffError> {
        let (a, asp) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        let (b, bsp) = other.with(|d, s| (d.to_vec(), s.to_vec()));
        let n = if a.len() == b.len() {
            a.len()
        } else if b.len() == 1 || a.len() == 1 {
            a.len().max(b.len())
        } else {
            return Err(DiffError::ShapeMismatch { op, lhs: asp, rhs: bsp });
        };
        if kind == BinKind::Div {
            if let Some(z) = b.iter().find(|v| **v == 0.0) {
                return Err(DiffError::Domain { op: "div", value: *z });
            }
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let x = a[if a.len() == 1 { 0 } else { i }];
            let y = b[if b.len() == 1 { 0 } else { i }];
            out[i] = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        }
        let out_shape = if a.len() >= b.len() { asp } else { bsp };
        Ok(self
            .tape
            .push(out, out_shape, Op::Binary { kind, a: self.idx, b: other.idx }))
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(o, BinKind::Add, "add")
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(o, BinKind::Sub, "sub")
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(o, BinKind::Mul, "mul")
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(o, BinKind::Div, "div")
    }

    fn unary(self, kind: UnKind, slope: f64) -> Var<'t> {
        let (a, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        let out: Vec<f64> = a
            .iter()
            .map(|&x| match kind {
                UnKind::Neg => -x,
                UnKind::Exp => x.exp(),
                UnKind::Ln => x.ln(),
                UnKind::Tanh => x.tanh(),
                UnKind::Sigmoid => sigmoid(x),
                UnKind::Relu => x.max(0.0),
                UnKind::LeakyRelu => {
                    if x > 0.0 {
                        x
                    } else {
                        slope * x
                    }
                }
                UnKind::Square => x * x,
                UnKind::Sqrt => x.sqrt(),
            })
            .collect();
        self.tape.push(out, shape, Op::Unary { kind, a: self.idx, slope })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnKind::Neg, 0.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnKind::Exp, 0.0)
    }

    pub fn ln(self) -> Result<Var<'t>, DiffError> {
        if let Some(v) = self.with(|d, _| d.iter().find(|v| **v <= 0.0).copied()) {
            return Err(DiffError::Domain { op: "log", value: v });
        }
        Ok(self.unary(UnKind::Ln, 0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnKind::Tanh, 0.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnKind::Sigmoid, 0.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnKind::Relu, 0.0)
    }

    /// Default slope 0.01.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(UnKind::LeakyRelu, slope)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnKind::Square, 0.0)
    }

    pub fn sqrt(self) -> Result<Var<'t>, DiffError> {
        if let Some(v) = self.with(|d, _| d.iter().find(|v| **v < 0.0).copied()) {
            return Err(DiffError::Domain { op: "sqrt", value: v });
        }
        Ok(self.unary(UnKind::Sqrt, 0.0))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (a, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        let out = a.iter().map(|x| x + c).collect();
        self.tape.push(out, shape, Op::AddScalarConst { a: self.idx })
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let (a, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        let out = a.iter().map(|x| x * c).collect();
        self.tape
            .push(out, shape, Op::MulScalarConst { a: self.idx, factor: c })
    }

    pub fn sum(self) -> Result<Var<'t>, DiffError> {
        if self.is_empty() {
            return Err(DiffError::EmptyReduction { op: "sum" });
        }
        let total = self.with(|d, _| d.iter().sum());
        Ok(self
            .tape
            .push(vec![total], vec![1], Op::Sum { a: self.idx, axis: None }))
    }

    pub fn mean(self) -> Result<Var<'t>, DiffError> {
        if self.is_empty() {
            return Err(DiffError::EmptyReduction { op: "mean" });
        }
        let m = self.with(|d, _| d.iter().sum::<f64>() / d.len() as f64);
        Ok(self
            .tape
            .push(vec![m], vec![1], Op::Mean { a: self.idx, axis: None }))
    }

    /// Full-reduce max; gradient routes to the first maximal element.
    pub fn max(self) -> Result<Var<'t>, DiffError> {
        if self.is_empty() {
            return Err(DiffError::EmptyReduction { op: "max" });
        }
        let (val, arg) = self.with(|d, _| {
            let mut best = (d[0], 0usize);
            for (i, &v) in d.iter().enumerate() {
                if v > best.0 {
                    best = (v, i);
                }
            }
            (best.0, best.1)
        });
        Ok(self
            .tape
            .push(vec![val], vec![1], Op::Max { a: self.idx, argmax: vec![arg] }))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        self.reduce_axis(axis, "sum")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        self.reduce_axis(axis, "mean")
    }

    fn reduce_axis(self, axis: usize, kind: &'static str) -> Result<Var<'t>, DiffError> {
        let (data, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        if shape.len() != 2 || axis > 1 {
            return Err(DiffError::AxisOutOfRange { axis, shape });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if data.is_empty() {
            return Err(DiffError::EmptyReduction { op: kind });
        }
        let (out, out_shape): (Vec<f64>, Vec<usize>) = if axis == 0 {
            let mut o = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    o[c] += data[r * cols + c];
                }
            }
            if kind == "mean" {
                o.iter_mut().for_each(|v| *v /= rows as f64);
            }
            (o, vec![cols])
        } else {
            let mut o = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    o[r] += data[r * cols + c];
                }
            }
            if kind == "mean" {
                o.iter_mut().for_each(|v| *v /= cols as f64);
            }
            (o, vec![rows])
        };
        let op = if kind == "sum" {
            Op::Sum { a: self.idx, axis: Some(axis) }
        } else {
            Op::Mean { a: self.idx, axis: Some(axis) }
        };
        Ok(self.tape.push(out, out_shape, op))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(self) -> Result<Var<'t>, DiffError> {
        let (data, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        if shape.len() != 1 || data.is_empty() {
            return Err(DiffError::EmptyReduction { op: "softmax" });
        }
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = exps.iter().map(|e| e / z).collect();
        Ok(self.tape.push(out, shape, Op::Softmax { a: self.idx }))
    }

    /// Row of a rank-2 tensor as a rank-1 tensor (embedding lookup).
    pub fn row(self, i: usize) -> Result<Var<'t>, DiffError> {
        let (data, shape) = self.with(|d, s| (d.to_vec(), s.to_vec()));
        assert_eq!(shape.len(), 2, "row() requires a rank-2 tensor");
        let (rows, cols) = (shape[0], shape[1]);
        if i >= rows {
            return Err(DiffError::RowOutOfRange { row: i, rows });
        }
        let out = data[i * cols..(i + 1) * cols].to_vec();
        Ok(self
            .tape
            .push(out, vec![cols], Op::GatherRow { src: self.idx, row: i }))
    }

    pub fn dot(self, o: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.mul(o)?.sum()
    }

    pub fn norm_sq(self) -> Result<Var<'t>, DiffError> {
        self.square().sum()
    }
}

/// Contiguous concatenation (rank-1 along axis 0, rank-2 along axis 0).
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>, DiffError> {
    assert!(!vars.is_empty(), "concat of zero tensors");
    let first_shape = vars[0].shape();
    let rank = first_shape.len();
    if axis != 0 || rank > 2 {
        return Err(DiffError::AxisOutOfRange { axis, shape: first_shape });
    }
    let mut data = Vec::new();
    let mut lead = 0usize;
    for v in vars {
        let s = v.shape();
        if s.len() != rank || (rank == 2 && s[1] != first_shape[1]) {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                lhs: first_shape,
                rhs: s,
            });
        }
        lead += s[0];
        data.extend(v.data());
    }
    let shape = if rank == 1 {
        vec![lead]
    } else {
        vec![lead, first_shape[1]]
    };
    let parts = vars.iter().map(|v| v.idx).collect();
    Ok(vars[0].tape.push(data, shape, Op::Concat { parts, axis }))
}

/// Stack equal-length rank-1 tensors into a rank-2 [n, d] tensor.
/// Shares concat's backward (row-major layout is identical).
pub fn stack_rows<'t>(vars: &[Var<'t>]) -> Result<Var<'t>, DiffError> {
    assert!(!vars.is_empty(), "stack of zero tensors");
    let d = vars[0].len();
    let mut data = Vec::with_capacity(vars.len() * d);
    for v in vars {
        let s = v.shape();
        if s != vec![d] {
            return Err(DiffError::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![d],
                rhs: s,
            });
        }
        data.extend(v.data());
    }
    let parts = vars.iter().map(|v| v.idx).collect();
    Ok(vars[0]
        .tape
        .push(data, vec![vars.len(), d], Op::Concat { parts, axis: 0 }))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Interpret a shape as a 2-D view for matmul. Rank-1 tensors are rows on
/// the left (`as_col = false`) and columns on the right.
fn as_2d(shape: &[usize], as_col: bool) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 if as_col => (shape[0], 1),
        1 => (1, shape[0]),
        r => panic!("matmul supports rank 1 or 2, got rank {r}"),
    }
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node(nodes: &mut [Node], i: usize) {
    let g = std::mem::take(&mut nodes[i].grad);
    let op = nodes[i].op.clone();
    match op {
        Op::Leaf { .. } => {}
        Op::Matmul { a, b } => {
            let (m, k) = as_2d(&nodes[a].shape, false);
            let n = as_2d(&nodes[b].shape, true).1;
            // dA = dC * B^T
            let mut da = vec![0.0; m * k];
            for i2 in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i2 * n + j] * nodes[b].data[p * n + j];
                    }
                    da[i2 * k + p] = acc;
                }
            }
            // dB = A^T * dC
            let mut db = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i2 in 0..m {
                        acc += nodes[a].data[i2 * k + p] * g[i2 * n + j];
                    }
                    db[p * n + j] = acc;
                }
            }
            add_into(&mut nodes[a].grad, &da);
            add_into(&mut nodes[b].grad, &db);
        }
        Op::Binary { kind, a, b } => {
            let alen = nodes[a].data.len();
            let blen = nodes[b].data.len();
            let n = alen.max(blen);
            let mut da = vec![0.0; alen];
            let mut db = vec![0.0; blen];
            for idx in 0..n {
                let ai = if alen == 1 { 0 } else { idx };
                let bi = if blen == 1 { 0 } else { idx };
                let x = nodes[a].data[ai];
                let y = nodes[b].data[bi];
                let gi = g[idx];
                match kind {
                    BinKind::Add => {
                        da[ai] += gi;
                        db[bi] += gi;
                    }
                    BinKind::Sub => {
                        da[ai] += gi;
                        db[bi] -= gi;
                    }
                    BinKind::Mul => {
                        da[ai] += gi * y;
                        db[bi] += gi * x;
                    }
                    BinKind::Div => {
                        da[ai] += gi / y;
                        db[bi] -= gi * x / (y * y);
                    }
                }
            }
            add_into(&mut nodes[a].grad, &da);
            add_into(&mut nodes[b].grad, &db);
        }
        Op::Unary { kind, a, slope } => {
            let mut da = vec![0.0; nodes[a].data.len()];
            for idx in 0..da.len() {
                let x = nodes[a].data[idx];
                let y = nodes[i].data[idx];
                da[idx] = g[idx]
                    * match kind {
                        UnKind::Neg => -1.0,
                        UnKind::Exp => y,
                        UnKind::Ln => 1.0 / x,
                        UnKind::Tanh => 1.0 - y * y,
                        UnKind::Sigmoid => y * (1.0 - y),
                        UnKind::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::LeakyRelu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                slope
                            }
                        }
                        UnKind::Square => 2.0 * x,
                        UnKind::Sqrt => 0.5 / y,
                    };
            }
            add_into(&mut nodes[a].grad, &da);
        }
        Op::Sum { a, axis } => {
            let shape = nodes[a].shape.clone();
            match axis {
                None => {
                    for d in nodes[a].grad.iter_mut() {
                        *d += g[0];
                    }
                }
                Some(ax) => {
                    let (rows, cols) = (shape[0], shape[1]);
                    for r in 0..rows {
                        for c in 0..cols {
                            nodes[a].grad[r * cols + c] += if ax == 0 { g[c] } else { g[r] };
                        }
                    }
                }
            }
        }
        Op::Mean { a, axis } => {
            let shape = nodes[a].shape.clone();
            match axis {
                None => {
                    let scale = 1.0 / nodes[a].data.len() as f64;
                    for d in nodes[a].grad.iter_mut() {
                        *d += g[0] * scale;
                    }
                }
                Some(ax) => {
                    let (rows, cols) = (shape[0], shape[1]);
                    let scale = 1.0 / if ax == 0 { rows as f64 } else { cols as f64 };
                    for r in 0..rows {
                        for c in 0..cols {
                            nodes[a].grad[r * cols + c] +=
                                scale * if ax == 0 { g[c] } else { g[r] };
                        }
                    }
                }
            }
        }
        Op::Max { a, argmax } => {
            for (slot, &src) in argmax.iter().enumerate() {
                nodes[a].grad[src] += g[slot];
            }
        }
        Op::Concat { parts, axis: _ } => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p].data.len();
                let slice = &g[offset..offset + n];
                add_into(&mut nodes[p].grad, slice);
                offset += n;
            }
        }
        Op::Softmax { a } => {
            let y = nodes[i].data.clone();
            let dot: f64 = y.iter().zip(&g).map(|(yi, gi)| yi * gi).sum();
            let mut da = vec![0.0; y.len()];
            for j in 0..y.len() {
                da[j] = y[j] * (g[j] - dot);
            }
            add_into(&mut nodes[a].grad, &da);
        }
        Op::GatherRow { src, row } => {
            let cols = nodes[src].shape[1];
            for c in 0..cols {
                nodes[src].grad[row * cols + c] += g[c];
            }
        }
        Op::AddScalarConst { a } => {
            add_into(&mut nodes[a].grad, &g);
        }
        Op::MulScalarConst { a, factor } => {
            let da: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
            add_into(&mut nodes[a].grad, &da);
        }
    }
    nodes[i].grad = g;
}
