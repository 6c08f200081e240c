//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records primitive applications during the forward pass;
//! [`Tape::backward`] replays them in reverse, accumulating gradients
//! additively across fan-out. Tensors are dense row-major 2-D values
//! (vectors are 1 x n); elementwise binaries broadcast a scalar, a row
//! against rows, or a column against columns.
//!
//! `ln` clamps its input at 1e-12 and has zero gradient below the clamp,
//! matching the probability clamping used by the bound evaluations.

use std::cell::RefCell;

use crate::error::{Error, Result};

pub const LN_CLAMP: f64 = 1e-12;

/// Handle to a tensor on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    Atan,
    Sqrt,
    Neg,
    Scale(f64),
    AddConst,
    MaxConst(f64),
    MinConst(f64),
    Sum,
    Mean,
    RowSum,
    Gather(Vec<usize>),
    Index(usize),
    Slice(usize),
    Concat,
}

struct Op {
    kind: OpKind,
    out: usize,
    parents: Vec<usize>,
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

/// Recording tape. Single-threaded by construction; independent tapes may
/// run concurrently.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(TapeInner { nodes: Vec::new(), ops: Vec::new() }) }
    }

    fn push_node(&self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "data length must match shape");
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node { value, rows, cols, requires_grad });
        Var { idx, rows, cols }
    }

    /// Non-differentiable input.
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push_node(data, rows, cols, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(1, 1, vec![v])
    }

    /// Differentiable input (a leaf that receives a gradient).
    pub fn param(&self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push_node(data, rows, cols, true)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.inner.borrow().nodes[v.idx].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert!(v.is_scalar());
        self.inner.borrow().nodes[v.idx].value[0]
    }

    fn record(&self, kind: OpKind, parents: Vec<usize>, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        let requires = {
            let inner = self.inner.borrow();
            parents.iter().any(|&p| inner.nodes[p].requires_grad)
        };
        let out = self.push_node(value, rows, cols, requires);
        self.inner.borrow_mut().ops.push(Op { kind, out: out.idx, parents });
        out
    }

    fn binary(&self, kind: OpKind, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (rows, cols) = broadcast_shape(a, b).unwrap_or_else(|e| panic!("{e}"));
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.idx].value;
            let bv = &inner.nodes[b.idx].value;
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    out.push(f(av[bindex(a, i, j)], bv[bindex(b, i, j)]));
                }
            }
            out
        };
        self.record(kind, vec![a.idx, b.idx], value, rows, cols)
    }

    fn unary(&self, kind: OpKind, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value: Vec<f64> = self.inner.borrow().nodes[a.idx].value.iter().map(|&x| f(x)).collect();
        self.record(kind, vec![a.idx], value, a.rows, a.cols)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(OpKind::Div, a, b, |x, y| x / y)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dims {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols);
        let (n, m, p) = (a.rows, a.cols, b.cols);
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.idx].value;
            let bv = &inner.nodes[b.idx].value;
            let mut out = vec![0.0; n * p];
            for i in 0..n {
                for k in 0..m {
                    let aik = av[i * m + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        out[i * p + j] += aik * bv[k * p + j];
                    }
                }
            }
            out
        };
        self.record(OpKind::Matmul, vec![a.idx, b.idx], value, n, p)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(OpKind::Exp, a, f64::exp)
    }

    /// Natural log, input clamped at [`LN_CLAMP`]; zero gradient below.
    pub fn ln(&self, a: Var) -> Var {
        self.unary(OpKind::Ln, a, |x| x.max(LN_CLAMP).ln())
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(OpKind::Sigmoid, a, sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(OpKind::Tanh, a, f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(OpKind::Relu, a, |x| x.max(0.0))
    }

    pub fn atan(&self, a: Var) -> Var {
        self.unary(OpKind::Atan, a, f64::atan)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(OpKind::Sqrt, a, |x| x.max(0.0).sqrt())
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(OpKind::Neg, a, |x| -x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(OpKind::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(OpKind::AddConst, a, |x| x + c)
    }

    /// Elementwise max(x, c); gradient gates to the side above c.
    pub fn max_const(&self, a: Var, c: f64) -> Var {
        self.unary(OpKind::MaxConst(c), a, |x| x.max(c))
    }

    pub fn min_const(&self, a: Var, c: f64) -> Var {
        self.unary(OpKind::MinConst(c), a, |x| x.min(c))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total: f64 = self.inner.borrow().nodes[a.idx].value.iter().sum();
        self.record(OpKind::Sum, vec![a.idx], vec![total], 1, 1)
    }

    pub fn mean(&self, a: Var) -> Var {
        let inner = self.inner.borrow();
        let v = &inner.nodes[a.idx].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        drop(inner);
        self.record(OpKind::Mean, vec![a.idx], vec![m], 1, 1)
    }

    /// Row sums: (n x k) -> (n x 1).
    pub fn row_sum(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[a.idx].value;
            (0..a.rows).map(|i| v[i * a.cols..(i + 1) * a.cols].iter().sum()).collect()
        };
        self.record(OpKind::RowSum, vec![a.idx], value, a.rows, 1)
    }

    /// Per-row element pick: (n x k) with n indices -> (n x 1).
    pub fn gather(&self, a: Var, indices: &[usize]) -> Var {
        assert_eq!(indices.len(), a.rows, "one index per row");
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[a.idx].value;
            indices.iter().enumerate().map(|(i, &j)| v[i * a.cols + j]).collect()
        };
        self.record(OpKind::Gather(indices.to_vec()), vec![a.idx], value, a.rows, 1)
    }

    /// Single element by flat index -> scalar.
    pub fn index(&self, a: Var, flat: usize) -> Var {
        let value = vec![self.inner.borrow().nodes[a.idx].value[flat]];
        self.record(OpKind::Index(flat), vec![a.idx], value, 1, 1)
    }

    /// Contiguous flat range viewed as a rows x cols tensor.
    pub fn slice(&self, a: Var, start: usize, rows: usize, cols: usize) -> Var {
        let value = self.inner.borrow().nodes[a.idx].value[start..start + rows * cols].to_vec();
        self.record(OpKind::Slice(start), vec![a.idx], value, rows, cols)
    }

    /// Concatenates scalars into a row vector.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value: Vec<f64> = {
            let inner = self.inner.borrow();
            parts
                .iter()
                .map(|p| {
                    debug_assert!(p.is_scalar());
                    inner.nodes[p.idx].value[0]
                })
                .collect()
        };
        self.record(OpKind::Concat, parts.iter().map(|p| p.idx).collect(), value, 1, parts.len())
    }

    /// Backpropagates from a scalar output; gradients of all
    /// `requires_grad` leaves become available through [`Tape::grad`].
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !root.is_scalar() {
            return Err(Error::invalid("backward root must be a scalar"));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Vec<f64>> = inner.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[root.idx][0] = 1.0;

        for op in inner.ops.iter().rev() {
            if !inner.nodes[op.out].requires_grad {
                continue;
            }
            backprop_op(op, &inner.nodes, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.idx]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: Var, b: Var) -> Result<(usize, usize)> {
    let ok = (a.rows == b.rows && a.cols == b.cols)
        || b.is_scalar()
        || a.is_scalar()
        || (b.rows == 1 && b.cols == a.cols)
        || (b.cols == 1 && b.rows == a.rows)
        || (a.rows == 1 && a.cols == b.cols)
        || (a.cols == 1 && a.rows == b.rows);
    if !ok {
        return Err(Error::invalid(format!(
            "incompatible shapes {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok((a.rows.max(b.rows), a.cols.max(b.cols)))
}

/// Flat index into operand `v` for output position (i, j) under broadcast.
fn bindex(v: Var, i: usize, j: usize) -> usize {
    let r = if v.rows == 1 { 0 } else { i };
    let c = if v.cols == 1 { 0 } else { j };
    r * v.cols + c
}

fn backprop_op(op: &Op, nodes: &[Node], grads: &mut [Vec<f64>]) {
    // Split the gradient storage so the output gradient can be read while
    // parent gradients are accumulated.
    let go: Vec<f64> = grads[op.out].clone();
    let out_node = &nodes[op.out];
    match &op.kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let a = varof(nodes, op.parents[0]);
            let b = varof(nodes, op.parents[1]);
            let (rows, cols) = (out_node.rows, out_node.cols);
            for i in 0..rows {
                for j in 0..cols {
                    let g = go[i * cols + j];
                    if g == 0.0 {
                        continue;
                    }
                    let ai = bindex(a, i, j);
                    let bi = bindex(b, i, j);
                    let (da, db) = match op.kind {
                        OpKind::Add => (g, g),
                        OpKind::Sub => (g, -g),
                        OpKind::Mul => {
                            let av = nodes[a.idx].value[ai];
                            let bv = nodes[b.idx].value[bi];
                            (g * bv, g * av)
                        }
                        OpKind::Div => {
                            let av = nodes[a.idx].value[ai];
                            let bv = nodes[b.idx].value[bi];
                            (g / bv, -g * av / (bv * bv))
                        }
                        _ => unreachable!(),
                    };
                    if nodes[a.idx].requires_grad {
                        grads[a.idx][ai] += da;
                    }
                    if nodes[b.idx].requires_grad {
                        grads[b.idx][bi] += db;
                    }
                }
            }
        }
        OpKind::Matmul => {
            let a = varof(nodes, op.parents[0]);
            let b = varof(nodes, op.parents[1]);
            let (n, m, p) = (a.rows, a.cols, b.cols);
            if nodes[a.idx].requires_grad {
                // dA = dC * B^T
                for i in 0..n {
                    for k in 0..m {
                        let mut acc = 0.0;
                        for j in 0..p {
                            acc += go[i * p + j] * nodes[b.idx].value[k * p + j];
                        }
                        grads[a.idx][i * m + k] += acc;
                    }
                }
            }
            if nodes[b.idx].requires_grad {
                // dB = A^T * dC
                for k in 0..m {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += nodes[a.idx].value[i * m + k] * go[i * p + j];
                        }
                        grads[b.idx][k * p + j] += acc;
                    }
                }
            }
        }
        OpKind::Exp => unary_bp(op, nodes, grads, &go, |_, out| out),
        OpKind::Ln => unary_bp(op, nodes, grads, &go, |x, _| if x < LN_CLAMP { 0.0 } else { 1.0 / x }),
        OpKind::Sigmoid => unary_bp(op, nodes, grads, &go, |_, out| out * (1.0 - out)),
        OpKind::Tanh => unary_bp(op, nodes, grads, &go, |_, out| 1.0 - out * out),
        OpKind::Relu => unary_bp(op, nodes, grads, &go, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        OpKind::Atan => unary_bp(op, nodes, grads, &go, |x, _| 1.0 / (1.0 + x * x)),
        OpKind::Sqrt => unary_bp(op, nodes, grads, &go, |x, out| if x <= 0.0 { 0.0 } else { 0.5 / out }),
        OpKind::Neg => unary_bp(op, nodes, grads, &go, |_, _| -1.0),
        OpKind::Scale(c) => {
            let c = *c;
            unary_bp(op, nodes, grads, &go, move |_, _| c)
        }
        OpKind::AddConst => unary_bp(op, nodes, grads, &go, |_, _| 1.0),
        OpKind::MaxConst(c) => {
            let c = *c;
            unary_bp(op, nodes, grads, &go, move |x, _| if x > c { 1.0 } else { 0.0 })
        }
        OpKind::MinConst(c) => {
            let c = *c;
            unary_bp(op, nodes, grads, &go, move |x, _| if x < c { 1.0 } else { 0.0 })
        }
        OpKind::Sum => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                for g in grads[p].iter_mut() {
                    *g += go[0];
                }
            }
        }
        OpKind::Mean => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                let scale = 1.0 / nodes[p].value.len() as f64;
                for g in grads[p].iter_mut() {
                    *g += go[0] * scale;
                }
            }
        }
        OpKind::RowSum => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                let cols = nodes[p].cols;
                for i in 0..nodes[p].rows {
                    for j in 0..cols {
                        grads[p][i * cols + j] += go[i];
                    }
                }
            }
        }
        OpKind::Gather(indices) => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                let cols = nodes[p].cols;
                for (i, &j) in indices.iter().enumerate() {
                    grads[p][i * cols + j] += go[i];
                }
            }
        }
        OpKind::Index(flat) => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                grads[p][*flat] += go[0];
            }
        }
        OpKind::Slice(start) => {
            let p = op.parents[0];
            if nodes[p].requires_grad {
                for (offset, &g) in go.iter().enumerate() {
                    grads[p][start + offset] += g;
                }
            }
        }
        OpKind::Concat => {
            for (slot, &p) in op.parents.iter().enumerate() {
                if nodes[p].requires_grad {
                    grads[p][0] += go[slot];
                }
            }
        }
    }
}

fn varof(nodes: &[Node], idx: usize) -> Var {
    Var { idx, rows: nodes[idx].rows, cols: nodes[idx].cols }
}

fn unary_bp(
    op: &Op,
    nodes: &[Node],
    grads: &mut [Vec<f64>],
    go: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
) {
    let p = op.parents[0];
    if !nodes[p].requires_grad {
        return;
    }
    for i in 0..go.len() {
        if go[i] != 0.0 {
            grads[p][i] += go[i] * deriv(nodes[p].value[i], nodes[op.out].value[i]);
        }
    }
}

/// Central-difference check of a scalar function built on a fresh tape per
/// evaluation.
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub ok: bool,
}

/// Compares the tape gradient of `f` at `point` against central finite
/// differences with step `h`. Relative error uses an absolute floor of
/// 1e-6 so near-zero gradients are compared absolutely.
pub fn grad_check(
    f: impl Fn(&Tape, Var) -> Var,
    point: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let x = tape.param(1, point.len(), point.to_vec());
    let y = f(&tape, x);
    if !y.is_scalar() {
        return Err(Error::invalid("grad_check target must return a scalar"));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).to_vec();

    let eval = |p: &[f64]| -> f64 {
        let t = Tape::new();
        let xv = t.param(1, p.len(), p.to_vec());
        let out = f(&t, xv);
        t.value_scalar(out)
    };

    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += h;
        let mut minus = point.to_vec();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_abs_err: max_abs, max_rel_err: max_rel, ok: max_rel <= tol })
}
