//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to the tape, so node order is a
//! topological order and the backward sweep is a single reverse pass that
//! visits each node once. Nodes that do not depend on any leaf are skipped.
//!
//! ```
//! use fisar_core::ndcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::from_rows(&[[3.0]]));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap()[(0, 0)], 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::{gemm, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    MaxConst(usize, f64),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A recording of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m[(0, 0)]
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: fn(usize, usize) -> Op) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let needs = self.needs(ia) || self.needs(ib);
        self.push(value, op(ia, ib), needs)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let needs = self.needs(self.idx(a));
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.binary(a, b, v, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.binary(a, b, v, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scaled(c);
        let ia = self.idx(a);
        self.unary(a, v, Op::Scale(ia, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ia = self.idx(a);
        self.unary(a, v, Op::Tanh(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ia = self.idx(a);
        self.unary(a, v, Op::Sigmoid(ia))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ia = self.idx(a);
        self.unary(a, v, Op::Exp(ia))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ia = self.idx(a);
        self.unary(a, v, Op::Log(ia))
    }

    /// Elementwise `max(a, c)`. The derivative is 1 where `a > c` and 0
    /// elsewhere, including at the tie.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        let ia = self.idx(a);
        self.unary(a, v, Op::MaxConst(ia, c))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        let ia = self.idx(a);
        self.unary(a, Matrix::from_rows(&[[s]]), Op::Sum(ia))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!("backward root must be 1x1, got {shape:?}")));
        }
        self.backward_seeded(root, Matrix::from_rows(&[[1.0]]))
    }

    /// Reverse sweep from an arbitrary node with an explicit output adjoint.
    pub fn backward_seeded(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        let r = self.idx(root);
        if seed.shape() != self.nodes[r].value.shape() {
            return Err(Error::DimensionMismatch(format!(
                "seed {:?} for node of shape {:?}",
                seed.shape(),
                self.nodes[r].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; r + 1];
        grads[r] = Some(seed);
        for i in (0..=r).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &g), &g);
                    self.acc(&mut grads, b, |t| t.add_assign_scaled(1.0, &g), &g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &g), &g);
                    let neg = g.scaled(-1.0);
                    self.acc(&mut grads, b, |t| t.add_assign_scaled(1.0, &neg), &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.needs(a) {
                        let d = g.zip_map(vb, |x, y| x * y);
                        self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                    }
                    if self.needs(b) {
                        let d = g.zip_map(va, |x, y| x * y);
                        self.acc(&mut grads, b, |t| t.add_assign_scaled(1.0, &d), &d);
                    }
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b].value;
                    if self.needs(a) {
                        let d = g.zip_map(vb, |x, y| x / y);
                        self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                    }
                    if self.needs(b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = node.value.zip_map(vb, |y, bb| y / bb);
                        let d = g.zip_map(&q, |x, y| -x * y);
                        self.acc(&mut grads, b, |t| t.add_assign_scaled(1.0, &d), &d);
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.scaled(c);
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.needs(a) {
                        match grads[a].as_mut() {
                            Some(t) => gemm(1.0, &g, false, vb, true, 1.0, t),
                            None => grads[a] = Some(g.matmul_tr(vb)),
                        }
                    }
                    if self.needs(b) {
                        match grads[b].as_mut() {
                            Some(t) => gemm(1.0, va, true, &g, false, 1.0, t),
                            None => grads[b] = Some(va.tr_matmul(&g)),
                        }
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y);
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(&self.nodes[a].value, |x, y| x / y);
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::MaxConst(a, c) => {
                    let d = g.zip_map(&self.nodes[a].value, |x, y| if y > c { x } else { 0.0 });
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.nodes[a].value.shape();
                    let d = Matrix::filled(rows, cols, g[(0, 0)]);
                    self.acc(&mut grads, a, |t| t.add_assign_scaled(1.0, &d), &d);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], target: usize, update: impl FnOnce(&mut Matrix), init: &Matrix) {
        if !self.needs(target) {
            return;
        }
        match grads[target].as_mut() {
            Some(t) => update(t),
            None => grads[target] = Some(init.clone()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints of the leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a node reached by the sweep. Nodes that did
    /// not influence the root are reported as unrecorded; use
    /// [`Gradients::get_or_zeros`] when a zero gradient is acceptable.
    pub fn get(&self, v: Var) -> Result<&Matrix> {
        if v.tape != self.tape {
            return Err(Error::UnrecordedLeaf(v.index));
        }
        match self.grads.get(v.index) {
            Some(Some(g)) => Ok(g),
            _ => Err(Error::UnrecordedLeaf(v.index)),
        }
    }

    /// Gradient with respect to a node of the given shape, zero when the
    /// node did not influence the root.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Result<Matrix> {
        if v.tape != self.tape {
            return Err(Error::UnrecordedLeaf(v.index));
        }
        match self.grads.get(v.index) {
            Some(Some(g)) => Ok(g.clone()),
            _ => Ok(Matrix::zeros(rows, cols)),
        }
    }
}
