//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation eagerly computes its value. When gradient recording is
//! enabled and at least one input requires a gradient, the result also keeps
//! a reference to its inputs together with whatever it needs for the
//! backward pass. [`Tensor::backward`] walks that graph in reverse
//! topological order, accumulates gradients into leaves, and consumes the
//! graph so intermediates are released.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NODES_RECORDED: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Total number of graph nodes recorded on this thread so far.
pub fn recorded_node_count() -> u64 {
    NODES_RECORDED.with(Cell::get)
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    is_leaf: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: RefCell<Option<Op>>,
}

enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    Exp(Tensor),
    Log(Tensor),
    Gelu(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Tensor),
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Tensor>),
    SliceRows {
        x: Tensor,
        start: usize,
    },
    GatherRows {
        x: Tensor,
        rows: Vec<usize>,
    },
    Pick {
        x: Tensor,
        cols: Vec<usize>,
    },
    Sum(Tensor),
    Mean(Tensor),
    SumLast(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Gelu(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x)
            | Op::SliceRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Pick { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::Embedding { table, .. } => vec![table],
            Op::ConcatRows(xs) => xs.iter().collect(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// A constant leaf.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data,
            requires_grad,
            is_leaf: true,
            grad: RefCell::new(None),
            op: RefCell::new(None),
        })))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], &[], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad {
            NODES_RECORDED.with(|n| n.set(n.get() + 1));
            Some(op)
        } else {
            None
        };
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            is_leaf: false,
            grad: RefCell::new(None),
            op: RefCell::new(op),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            is_leaf: true,
            grad: RefCell::new(None),
            op: RefCell::new(None),
        }))
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn accumulate(&self, contribution: Vec<f64>) {
        let mut grad = self.0.grad.borrow_mut();
        match grad.as_mut() {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(g, c)| *g += c),
            None => *grad = Some(contribution),
        }
    }

    // ---- operations -----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.rows_cols("matmul")?;
        let (k2, c) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r * c];
        gemm(r, k, c, self.data(), false, other.data(), false, &mut out);
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("transpose")?;
        Ok(Tensor::from_op(
            vec![c, r],
            transpose(self.data(), r, c),
            Op::Transpose(self.clone()),
        ))
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.rows_cols("add_row")?;
        if row.shape() != [c] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let b = row.data();
        let data = self
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddRow(self.clone(), row.clone()),
        ))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::NonFinite { op: "log" });
        }
        let data = self.data().iter().map(|x| x.ln()).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Log(self.clone()),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| gelu(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    /// Row-wise layer normalization of an `r×c` matrix with eps 1e-5 inside
    /// the square root; a constant row maps to `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("layer_norm")?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let (m, inv) = norm_stats(row);
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - m) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gain.data()[j] + bias.data()[j];
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Log-probabilities along the last dimension, stabilized by subtracting
    /// the row maximum.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let v = *self.shape().last().ok_or(Error::Shape {
            op: "log_softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        if self.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(v) {
            out.extend(log_softmax_row(row));
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax(self.clone()),
        ))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q` is `nq×d`, `k` and `v` are `nk×d` with `nk ≥ nq`. Query row `i`
    /// sits at absolute position `nk − nq + i` and attends to keys `0..=` that
    /// position.
    pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
        let (nq, d) = q.rows_cols("attention")?;
        let (nk, dk) = k.rows_cols("attention")?;
        if k.shape() != v.shape() || dk != d || nk < nq || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let dh = d / heads;
        let offset = nk - nq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let di = d as isize;
        let nki = nk as isize;
        for h in 0..heads {
            let col = h * dh;
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            // S = scale · Q_h K_hᵀ, then a row-wise causal softmax.
            strided_gemm(
                (nq, dh, nk),
                scale,
                (&qd[col..], di, 1),
                (&kd[col..], 1, di),
                (p, nki, 1),
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let (vis, hidden) = row.split_at_mut(offset + i + 1);
                hidden.iter_mut().for_each(|x| *x = 0.0);
                let max = vis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in vis.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                vis.iter_mut().for_each(|x| *x /= z);
            }
            strided_gemm(
                (nq, nk, dh),
                1.0,
                (p, nki, 1),
                (&vd[col..], di, 1),
                (&mut out[col..], di, 1),
            );
        }
        Ok(Tensor::from_op(
            vec![nq, d],
            out,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.rows_cols("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of empty id list"));
        }
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = first.rows_cols("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = p.rows_cols("concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            vec![rows, c],
            out,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                size: r,
            });
        }
        Ok(Tensor::from_op(
            vec![len, c],
            self.data()[start * c..(start + len) * c].to_vec(),
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::contract("gather_rows of no rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_op(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                x: self.clone(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// Picks element `cols[i]` from row `i`; returns a length-`r` vector.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols("pick")?;
        if cols.len() != r {
            return Err(Error::Shape {
                op: "pick",
                lhs: self.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    op: "pick",
                    index: j,
                    size: c,
                });
            }
            out.push(self.data()[i * c + j]);
        }
        Ok(Tensor::from_op(
            vec![r],
            out,
            Op::Pick {
                x: self.clone(),
                cols: cols.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![],
            vec![s / self.numel() as f64],
            Op::Mean(self.clone()),
        )
    }

    /// Sums each row of an `r×c` matrix.
    pub fn sum_last(&self) -> Result<Tensor> {
        let (_, c) = self.rows_cols("sum_last")?;
        let data = self.data().chunks(c).map(|r| r.iter().sum()).collect();
        Ok(Tensor::from_op(
            vec![self.shape()[0]],
            data,
            Op::SumLast(self.clone()),
        ))
    }

    /// Sums scalar tensors in order.
    pub fn sum_all(parts: &[Tensor]) -> Result<Tensor> {
        let mut iter = parts.iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::contract("sum of no tensors"))?
            .clone();
        iter.try_fold(first, |acc, t| acc.add(t))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d self / d leaf` into every leaf that requires a gradient
    /// and consumes the recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract("loss is not attached to a recorded graph"));
        }
        let order = self.topological_order();
        self.accumulate(vec![1.0]);
        for node in order.iter().rev() {
            let Some(op) = node.0.op.borrow_mut().take() else {
                continue;
            };
            let grad = if node.0.is_leaf {
                node.grad()
            } else {
                node.0.grad.borrow_mut().take()
            };
            let Some(grad) = grad else { continue };
            node.backward_op(&op, &grad);
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.0.op.borrow().as_ref() {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn backward_op(&self, op: &Op, g: &[f64]) {
        let out = self.data();
        let send = |t: &Tensor, contribution: Vec<f64>| {
            if t.requires_grad() {
                t.accumulate(contribution);
            }
        };
        match op {
            Op::MatMul(a, b) => {
                let (r, k) = (a.shape()[0], a.shape()[1]);
                let c = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![0.0; r * k];
                    gemm(r, c, k, g, false, b.data(), true, &mut da);
                    a.accumulate(da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * c];
                    gemm(k, r, c, a.data(), true, g, false, &mut db);
                    b.accumulate(db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                send(x, transpose(g, c, r));
            }
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    a.accumulate(g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                }
                if b.requires_grad() {
                    b.accumulate(g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(x, f) => send(x, g.iter().map(|g| g * f).collect()),
            Op::AddRow(x, row) => {
                send(x, g.to_vec());
                if row.requires_grad() {
                    let c = row.numel();
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    row.accumulate(db);
                }
            }
            Op::Exp(x) => send(x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(x) => send(x, g.iter().zip(x.data()).map(|(g, x)| g / x).collect()),
            Op::Gelu(x) => send(
                x,
                g.iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = gain.numel();
                if gain.requires_grad() {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    gain.accumulate(dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    bias.accumulate(db);
                }
                if x.requires_grad() {
                    let gamma = gain.data();
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gamma[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gamma[j];
                            dx[i * c + j] = inv_std[i] / cf * (cf * dh - s1 - hr[j] * s2);
                        }
                    }
                    x.accumulate(dx);
                }
            }
            Op::LogSoftmax(x) => {
                let v = *x.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(v).zip(g.chunks(v)).zip(out.chunks(v)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..v {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                send(x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => attention_backward(q, k, v, *heads, probs, g),
            Op::Embedding { table, ids } => {
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                send(table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                send(x, dx);
            }
            Op::GatherRows { x, rows } => {
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                send(x, dx);
            }
            Op::Pick { x, cols } => {
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                send(x, dx);
            }
            Op::Sum(x) => send(x, vec![g[0]; x.numel()]),
            Op::Mean(x) => send(x, vec![g[0] / x.numel() as f64; x.numel()]),
            Op::SumLast(x) => {
                let c = x.shape()[1];
                send(x, g.iter().flat_map(|&gi| std::iter::repeat(gi).take(c)).collect());
            }
        }
    }
}

fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, probs: &[f64], g: &[f64]) {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = d / heads;
    let offset = nk - nq;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut ds = vec![0.0; nq * nk];
    let di = d as isize;
    let nki = nk as isize;
    for h in 0..heads {
        let col = h * dh;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let go = &g[col..];
        // dV_h += Pᵀ dO_h
        strided_gemm((nk, nq, dh), 1.0, (p, 1, nki), (go, di, 1), (&mut dv[col..], di, 1));
        // dP = dO_h V_hᵀ
        ds.iter_mut().for_each(|x| *x = 0.0);
        strided_gemm((nq, dh, nk), 1.0, (go, di, 1), (&vd[col..], 1, di), (&mut ds, nki, 1));
        for i in 0..nq {
            let visible = offset + i + 1;
            let pr = &p[i * nk..i * nk + visible];
            let dr = &mut ds[i * nk..(i + 1) * nk];
            let weighted = dot(pr, &dr[..visible]);
            for (x, &pj) in dr[..visible].iter_mut().zip(pr) {
                *x = pj * (*x - weighted) * scale;
            }
            dr[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        // dQ_h += dS K_h ; dK_h += dSᵀ Q_h
        strided_gemm((nq, nk, dh), 1.0, (&ds, nki, 1), (&kd[col..], di, 1), (&mut dq[col..], di, 1));
        strided_gemm((nk, nq, dh), 1.0, (&ds, 1, nki), (&qd[col..], di, 1), (&mut dk[col..], di, 1));
    }
    if q.requires_grad() {
        q.accumulate(dq);
    }
    if k.requires_grad() {
        k.accumulate(dk);
    }
    if v.requires_grad() {
        v.accumulate(dv);
    }
}

// ---- kernels shared with the incremental decoder --------------------------

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`. With
/// `a_t` set, `a` is stored as `k×m`; with `b_t` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are sized for the declared dimensions and strides
    // (checked above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += alpha · a · b` on strided views: `a` is `m×k`, `b` is `k×n`, `c` is
/// `m×n`, each given as `(slice, row stride, column stride)`.
fn strided_gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: (&mut [f64], isize, isize),
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(last(m, k, a.1, a.2) < a.0.len());
    assert!(last(k, n, b.1, b.2) < b.0.len());
    assert!(last(m, n, c.1, c.2) < c.0.len());
    // SAFETY: every addressed element lies within its slice (asserted above)
    // and `c` is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(move |x| x - lse)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
