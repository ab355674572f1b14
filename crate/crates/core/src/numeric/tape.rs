//! Matrix-valued reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints. Nodes that do not
//! depend on any leaf are constants and never receive adjoints.
//!
//! ```
//! use frisbi::numeric::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Matrix::scalar(3.0));
//! let loss = tape.sum(tape.square(p));
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).unwrap().item().unwrap(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::matrix::gemm;
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Matrix>),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    RowSums(Var),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    PairwiseSqDist(Var, Var),
    RowLogSumExp(Var),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(&self.value(b)).expect("matmul shape");
        self.push(out, Op::MatMul(a, b), self.rg(a) || self.rg(b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row column mismatch");
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), self.rg(a) || self.rg(row))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y).expect("add shape");
        self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y).expect("sub shape");
        self.push(out, Op::Sub(a, b), self.rg(a) || self.rg(b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y).expect("mul shape");
        self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), self.rg(a))
    }

    /// Elementwise product with a constant that never receives an adjoint.
    pub fn mul_const(&self, a: Var, c: Matrix) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y).expect("mul_const shape");
        self.push(out, Op::MulConst(a, Rc::new(c)), self.rg(a))
    }

    pub fn add_const(&self, a: Var, c: &Matrix) -> Var {
        let out = self.value(a).zip_map(c, |x, y| x + y).expect("add_const shape");
        self.push(out, Op::AddConst(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), self.rg(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), self.rg(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), self.rg(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), self.rg(a))
    }

    /// Row sums, as an `n×1` node.
    pub fn row_sums(&self, a: Var) -> Var {
        let out = Matrix::column_vector(self.value(a).row_sums());
        self.push(out, Op::RowSums(a), self.rg(a))
    }

    /// Column `c` of `a`, as an `n×1` node.
    pub fn column(&self, a: Var, c: usize) -> Var {
        let out = Matrix::column_vector(self.value(a).column(c));
        self.push(out, Op::Column(a, c), self.rg(a))
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Matrix>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat_cols rows");
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat_cols");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Squared Euclidean distances between rows of `a` and rows of `b`.
    pub fn pairwise_sqdist(&self, a: Var, b: Var) -> Var {
        let out = super::pairwise_sqdist(&self.value(a), &self.value(b)).expect("sqdist shape");
        self.push(out, Op::PairwiseSqDist(a, b), self.rg(a) || self.rg(b))
    }

    /// Per-row log-sum-exp, as an `n×1` node.
    pub fn row_logsumexp(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::column_vector(
            (0..av.rows())
                .map(|r| super::special::logsumexp_unchecked(av.row(r)))
                .collect(),
        );
        self.push(out, Op::RowLogSumExp(a), self.rg(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::NonScalarLoss);
        }
        let mut adj: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let send = |v: Var, contrib: Matrix, adj: &mut Vec<Option<Matrix>>| {
                match &mut adj[v.0] {
                    Some(acc) => {
                        for (a, c) in acc.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        let bv = val(*b);
                        let mut da = Matrix::zeros(g.rows(), bv.rows());
                        gemm(false, &g, true, bv, &mut da, 0.0);
                        send(*a, da, &mut adj);
                    }
                    if wants(*b) {
                        let av = val(*a);
                        let mut db = Matrix::zeros(av.cols(), g.cols());
                        gemm(true, av, false, &g, &mut db, 0.0);
                        send(*b, db, &mut adj);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        let cs = g.col_sums();
                        send(*row, Matrix::from_vec(1, cs.len(), cs).unwrap(), &mut adj);
                    }
                    if wants(*a) {
                        send(*a, g, &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        send(*b, g.clone(), &mut adj);
                    }
                    if wants(*a) {
                        send(*a, g, &mut adj);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        send(*b, g.map(|x| -x), &mut adj);
                    }
                    if wants(*a) {
                        send(*a, g, &mut adj);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x * y).unwrap(), &mut adj);
                    }
                    if wants(*b) {
                        send(*b, g.zip_map(val(*a), |x, y| x * y).unwrap(), &mut adj);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    send(*a, g.map(|x| x * k), &mut adj);
                }
                Op::MulConst(a, c) => {
                    send(*a, g.zip_map(c, |x, y| x * y).unwrap(), &mut adj);
                }
                Op::AddConst(a) => send(*a, g, &mut adj),
                Op::Relu(a) => {
                    let d = g
                        .zip_map(&node.value, |x, y| if y > 0.0 { x } else { 0.0 })
                        .unwrap();
                    send(*a, d, &mut adj);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y)).unwrap();
                    send(*a, d, &mut adj);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y).unwrap();
                    send(*a, d, &mut adj);
                }
                Op::Square(a) => {
                    let d = g.zip_map(val(*a), |x, y| 2.0 * x * y).unwrap();
                    send(*a, d, &mut adj);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.as_slice()[0]), &mut adj);
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).fill(g.get(i, 0));
                    }
                    send(*a, d, &mut adj);
                }
                Op::Column(a, col) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.set(i, *col, g.get(i, 0));
                    }
                    send(*a, d, &mut adj);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        if wants(p) {
                            let mut d = Matrix::zeros(r, c);
                            for i in 0..r {
                                d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            send(p, d, &mut adj);
                        }
                        offset += c;
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    if wants(*a) {
                        // dA_i = 2 (Σ_j G_ij) a_i − 2 (G B)_i
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm(false, &g, false, bv, &mut da, 0.0);
                        let rs = g.row_sums();
                        for i in 0..av.rows() {
                            for (d, x) in da.row_mut(i).iter_mut().zip(av.row(i)) {
                                *d = 2.0 * (rs[i] * x - *d);
                            }
                        }
                        send(*a, da, &mut adj);
                    }
                    if wants(*b) {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(true, &g, false, av, &mut db, 0.0);
                        let cs = g.col_sums();
                        for j in 0..bv.rows() {
                            for (d, y) in db.row_mut(j).iter_mut().zip(bv.row(j)) {
                                *d = 2.0 * (cs[j] * y - *d);
                            }
                        }
                        send(*b, db, &mut adj);
                    }
                }
                Op::RowLogSumExp(a) => {
                    let av = val(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let lse = node.value.get(i, 0);
                        let gi = g.get(i, 0);
                        for (o, x) in d.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = gi * (x - lse).exp();
                        }
                    }
                    send(*a, d, &mut adj);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}
