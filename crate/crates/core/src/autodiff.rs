//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is applied and evaluates it
//! eagerly, so the value of any node is available as soon as it is built.
//! [`Tape::backward`] then walks the tape once in reverse order, accumulating
//! adjoints into a scratch buffer owned by that call. The tape itself is never
//! mutated by a backward pass, so calling it twice gives identical results.
//!
//! The op set is exactly what the trainers need: bias-free affine maps,
//! ReLU, row-wise log-softmax, and a handful of elementwise and reduction
//! ops. The ReLU derivative at zero is taken to be zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    LogSoftmax(Var),
    Sum(Var),
    RowSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
        }
    }
}

#[derive(Debug)]
struct TapeNode {
    op: Op,
    value: Matrix,
}

/// Partial derivatives keyed by the node they were requested for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<Var, Matrix>,
}

impl GradientSet {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients in the order the variables are listed.
    pub fn collect(mut self, vars: &[Var]) -> Vec<Matrix> {
        vars.iter()
            .map(|v| self.grads.remove(v).expect("gradient requested for every var"))
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
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

    /// Adds an input node. Whether it is a parameter or a constant is decided
    /// only by what gets passed to [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The cached value at `root`.
    pub fn forward(&self, root: Var) -> &Matrix {
        self.value(root)
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).as_scalar()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(TapeNode { op, value });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.mismatch(op, format!("node {} is {sa:?}, node {} is {sb:?}", a.0, b.0)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|e| self.mismatch("matmul", format!("nodes {} and {}: {e}", a.0, b.0)))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`; with `a` a batch of row inputs and `b` a weight matrix this is
    /// one bias-free layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .matmul_t(self.value(b))
            .map_err(|e| self.mismatch("matmul_t", format!("nodes {} and {}: {e}", a.0, b.0)))?;
        Ok(self.push(Op::MatMulT(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(Op::Shift(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), value)
    }

    /// Elementwise square root. The derivative at exactly zero is taken as
    /// zero rather than infinity.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(self.mismatch("sqrt", format!("negative input {v} at node {}", a.0)));
        }
        let value = self.value(a).map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), value))
    }

    /// Row-wise `z − logsumexp(z)`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmax(a), value)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, as a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_raw(m.rows(), 1, m.row_iter().map(|r| r.iter().sum()).collect());
        self.push(Op::RowSum(a), value)
    }

    /// Exact reverse-mode partials of the scalar `root` with respect to each
    /// of `wanted`. Nodes that do not influence `root` get zero gradients.
    pub fn backward(&self, root: Var, wanted: &[Var]) -> Result<GradientSet> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                node: root.0,
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(b))?;
                    let db = self.value(a).t_matmul(&g)?;
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(b))?;
                    let db = g.t_matmul(self.value(a))?;
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.clone())?;
                    accumulate(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, g.scale(-1.0))?;
                    accumulate(&mut adj, a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(b))?;
                    let db = g.hadamard(self.value(a))?;
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, g.scale(s))?,
                Op::Shift(a) => accumulate(&mut adj, a, g)?,
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Exp(a) => {
                    let d = g.hadamard(&node.value)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), "square'", |g, x| 2.0 * x * g)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(&node.value, "sqrt'", |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Vec::with_capacity(g.len());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(y.row(r)).map(|(gi, yi)| gi - yi.exp() * total));
                    }
                    accumulate(&mut adj, a, Matrix::from_raw(g.rows(), g.cols(), d))?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::filled(r, c, g.data()[0]))?;
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)))?;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for &v in wanted {
            let m = match adj.get_mut(v.0).and_then(Option::take) {
                Some(m) => m,
                None => {
                    let (r, c) = self.value(v).shape();
                    Matrix::zeros(r, c)
                }
            };
            grads.insert(v, m);
        }
        Ok(GradientSet { grads })
    }

    /// Gradient of a scalar `root` with respect to a single input leaf.
    pub fn input_gradient(&self, root: Var, input: Var) -> Result<Matrix> {
        let mut set = self.backward(root, &[input])?;
        Ok(set.take(input).expect("requested"))
    }

    /// Name of the operation that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    Matrix::from_raw(m.rows(), m.cols(), out)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
