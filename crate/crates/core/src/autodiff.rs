//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; parents always precede children, so the node
//! order is a topological order and `backward` is a single reverse sweep.
//!
//! The op set is what the model needs: elementwise arithmetic and
//! activations, matmul/transpose, row softmax (optionally causal), trace,
//! Cholesky, triangular solves, log-determinant, slicing/concatenation,
//! broadcasts, gathers, pairwise distances, and two "local derivative"
//! ops for special functions whose derivatives are computed outside the
//! tape (log-gamma, digamma, implicitly reparameterized Beta draws).
//!
//! ```
//! use df2m::autodiff::Tape;
//! use nalgebra::DMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = tape.mul(x, x).unwrap();
//! let g = tape.backward(y, &[x]).unwrap();
//! assert_eq!(g.get(x).unwrap()[(0, 0)], 6.0);
//! # let _ = DMatrix::<f64>::zeros(1, 1);
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically (rows add up).
    Rows,
    /// Stack horizontally (columns add up).
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Trace(Var),
    Cholesky(Var),
    TriSolve { l: Var, b: Var, transpose: bool },
    LogDet { a: Var, chol: DMatrix<f64> },
    Slice { x: Var, row: usize, col: usize },
    Concat { parts: Vec<Var>, axis: Axis },
    MulScalar { x: Var, s: Var },
    BroadcastRows(Var),
    BroadcastCols(Var),
    Gather { x: Var, index: Vec<usize> },
    BlockColSum { x: Var, block: usize },
    Map { x: Var, deriv: DMatrix<f64> },
    Map2 { a: Var, b: Var, da: DMatrix<f64>, db: DMatrix<f64> },
    PairDist { a: Var, b: Var, squared: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sqrt(_) => "sqrt",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Sum(_) => "sum",
            Op::Trace(_) => "trace",
            Op::Cholesky(_) => "cholesky",
            Op::TriSolve { .. } => "tri_solve",
            Op::LogDet { .. } => "logdet",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::MulScalar { .. } => "mul_scalar",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Gather { .. } => "gather",
            Op::BlockColSum { .. } => "block_col_sum",
            Op::Map { .. } => "map",
            Op::Map2 { .. } => "map2",
            Op::PairDist { .. } => "pair_dist",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Transpose(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Sqrt(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::Trace(x)
            | Op::Cholesky(x)
            | Op::BroadcastRows(x)
            | Op::BroadcastCols(x) => vec![*x],
            Op::TriSolve { l, b, .. } => vec![*l, *b],
            Op::LogDet { a, .. } => vec![*a],
            Op::Slice { x, .. } | Op::Gather { x, .. } | Op::BlockColSum { x, .. } | Op::Map { x, .. } => {
                vec![*x]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::Map2 { a, b, .. } => vec![*a, *b],
            Op::PairDist { a, b, .. } => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    causal: bool,
}

/// Adjoints for the handles requested in [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(Var, DMatrix<f64>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &DMatrix<f64>)> {
        self.grads.iter().map(|(k, g)| (*k, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// The recording tape. Rebuilt for every objective evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Result<Var> {
        if !linalg::all_finite(&value) {
            return Err(Error::non_finite(format!("forward `{}`", op.name())));
        }
        self.nodes.push(Node {
            value,
            op,
            causal: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    /// A new input node (parameter or constant; the distinction is only
    /// which handles are passed to `backward`).
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            causal: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, x))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Operation tag of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("div", self.value(a), self.value(b))?;
        let v = self.value(a).component_div(self.value(b));
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |a| -a, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |a| a + c, Op::AddConst(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let v = va * vb;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax restricted to columns `j <= i` (lower triangle);
    /// masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let (r, c) = v.shape();
        if causal && r != c {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: (r, c),
                rhs: (r, r),
            });
        }
        let mut out = DMatrix::zeros(r, c);
        for i in 0..r {
            let width = if causal { i + 1 } else { c };
            let mx = (0..width).map(|j| v[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..width {
                let e = (v[(i, j)] - mx).exp();
                out[(i, j)] = e;
                z += e;
            }
            for j in 0..width {
                out[(i, j)] /= z;
            }
        }
        let var = self.push(out, Op::SoftmaxRows(x))?;
        self.nodes[var.0].causal = causal;
        Ok(var)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push(DMatrix::from_element(1, 1, s), Op::Sum(x))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.nrows() != v.ncols() {
            return Err(Error::ShapeMismatch {
                op: "trace",
                lhs: v.shape(),
                rhs: (v.nrows(), v.nrows()),
            });
        }
        let s = v.trace();
        self.push(DMatrix::from_element(1, 1, s), Op::Trace(x))
    }

    /// Lower Cholesky factor, with the jitter ladder of [`linalg::cholesky_jittered`].
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (l, _) = linalg::cholesky_jittered(self.value(a))?;
        self.push(l, Op::Cholesky(a))
    }

    /// `L⁻¹ B` (or `L⁻ᵀ B` when `transpose`), reading only the lower triangle of `L`.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        self.check(l)?;
        self.check(b)?;
        let (vl, vb) = (self.value(l), self.value(b));
        if vl.nrows() != vl.ncols() || vl.ncols() != vb.nrows() {
            return Err(Error::ShapeMismatch {
                op: "tri_solve",
                lhs: vl.shape(),
                rhs: vb.shape(),
            });
        }
        let x = if transpose {
            linalg::solve_lower_transpose(vl, vb)
        } else {
            linalg::solve_lower(vl, vb)
        };
        self.push(x, Op::TriSolve { l, b, transpose })
    }

    /// `log|A|` of a symmetric positive definite matrix, via Cholesky.
    pub fn logdet(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (chol, _) = linalg::cholesky_jittered(self.value(a))?;
        let v = linalg::logdet_from_cholesky(&chol);
        self.push(DMatrix::from_element(1, 1, v), Op::LogDet { a, chol })
    }

    pub fn slice(&mut self, x: Var, row: usize, col: usize, nrows: usize, ncols: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if row + nrows > v.nrows() || col + ncols > v.ncols() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: v.shape(),
                rhs: (row + nrows, col + ncols),
            });
        }
        let out = v.view((row, col), (nrows, ncols)).into_owned();
        self.push(out, Op::Slice { x, row, col })
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let c = self.shape(x).1;
        self.slice(x, i, 0, 1, c)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.shape(parts[0]);
        let out = match axis {
            Axis::Rows => {
                let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
                let mut out = DMatrix::zeros(total, first.1);
                let mut r0 = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.ncols() != first.1 {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: v.shape(),
                        });
                    }
                    out.view_mut((r0, 0), v.shape()).copy_from(v);
                    r0 += v.nrows();
                }
                out
            }
            Axis::Cols => {
                let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut out = DMatrix::zeros(first.0, total);
                let mut c0 = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.nrows() != first.0 {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: v.shape(),
                        });
                    }
                    out.view_mut((0, c0), v.shape()).copy_from(v);
                    c0 += v.ncols();
                }
                out
            }
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Every entry of `x` times the 1x1 node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if self.shape(s) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(s),
                rhs: (1, 1),
            });
        }
        let c = self.scalar_value(s);
        let v = self.value(x) * c;
        self.push(v, Op::MulScalar { x, s })
    }

    /// Repeat a 1×c row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.nrows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: v.shape(),
                rhs: (1, v.ncols()),
            });
        }
        let out = DMatrix::from_fn(rows, v.ncols(), |_, j| v[(0, j)]);
        self.push(out, Op::BroadcastRows(x))
    }

    /// Repeat an r×1 column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.ncols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                lhs: v.shape(),
                rhs: (v.nrows(), 1),
            });
        }
        let out = DMatrix::from_fn(v.nrows(), cols, |i, _| v[(i, 0)]);
        self.push(out, Op::BroadcastCols(x))
    }

    /// Build a `rows × cols` matrix whose column-major entry `j` is the
    /// column-major entry `index[j]` of `x`. Covers reshapes and permutations.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if index.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: (index.len(), 1),
                rhs: (rows, cols),
            });
        }
        let flat = src.as_slice();
        if let Some(&bad) = index.iter().find(|&&i| i >= flat.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: src.shape(),
                rhs: (bad, 0),
            });
        }
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let out = DMatrix::from_vec(rows, cols, data);
        self.push(out, Op::Gather { x, index })
    }

    /// Sum each consecutive group of `block` columns: r×(b·block) → r×b.
    pub fn block_col_sum(&mut self, x: Var, block: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if block == 0 || v.ncols() % block != 0 {
            return Err(Error::ShapeMismatch {
                op: "block_col_sum",
                lhs: v.shape(),
                rhs: (v.nrows(), block),
            });
        }
        let nb = v.ncols() / block;
        let out = DMatrix::from_fn(v.nrows(), nb, |i, b| {
            (0..block).map(|j| v[(i, b * block + j)]).sum()
        });
        self.push(out, Op::BlockColSum { x, block })
    }

    /// Elementwise `f(x)` with a caller-supplied derivative `df(x)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.map(&f);
        let deriv = v.map(&df);
        if !linalg::all_finite(&deriv) {
            return Err(Error::non_finite("forward `map` derivative"));
        }
        self.push(out, Op::Map { x, deriv })
    }

    /// Elementwise binary op with precomputed partial derivatives.
    pub fn map2_with(
        &mut self,
        a: Var,
        b: Var,
        value: DMatrix<f64>,
        da: DMatrix<f64>,
        db: DMatrix<f64>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("map2", self.value(a), self.value(b))?;
        same_shape("map2", self.value(a), &value)?;
        same_shape("map2", &value, &da)?;
        same_shape("map2", &value, &db)?;
        if !linalg::all_finite(&da) || !linalg::all_finite(&db) {
            return Err(Error::non_finite("forward `map2` derivative"));
        }
        self.push(value, Op::Map2 { a, b, da, db })
    }

    /// Pairwise (squared) Euclidean distances between rows of `a` and rows of `b`.
    pub fn pair_dist(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::ShapeMismatch {
                op: "pair_dist",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out = DMatrix::from_fn(va.nrows(), vb.nrows(), |i, j| {
            let d2: f64 = (0..va.ncols()).map(|k| (va[(i, k)] - vb[(j, k)]).powi(2)).sum();
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        });
        self.push(out, Op::PairDist { a, b, squared })
    }

    // ---- composites -------------------------------------------------------

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Add a 1×c bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let r = self.shape(x).0;
        let b = self.broadcast_rows(bias, r)?;
        self.add(x, b)
    }

    /// `x W + b` with a 1×out bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// `log(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let nx = self.neg(x)?;
        let sp = self.softplus(nx)?;
        self.neg(sp)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.leaf(value)
    }

    /// 1×c row of column sums.
    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).0;
        let ones = self.constant(DMatrix::from_element(1, r, 1.0));
        self.matmul(ones, x)
    }

    /// r×1 column of row sums.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let c = self.shape(x).1;
        let ones = self.constant(DMatrix::from_element(c, 1, 1.0));
        self.matmul(x, ones)
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "diag",
                lhs: (r, c),
                rhs: (r, r),
            });
        }
        self.gather(x, r, 1, (0..r).map(|i| i * r + i).collect())
    }

    /// `log|A|` given the node holding a lower Cholesky factor of `A`.
    pub fn logdet_from_chol(&mut self, l: Var) -> Result<Var> {
        let d = self.diag(l)?;
        let ld = self.log(d)?;
        let s = self.sum(ld)?;
        self.scale(s, 2.0)
    }

    /// `L⁻¹` for a lower-triangular node.
    pub fn tri_inverse(&mut self, l: Var) -> Result<Var> {
        let n = self.shape(l).0;
        let eye = self.constant(DMatrix::identity(n, n));
        self.tri_solve(l, eye, false)
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse-mode adjoints of the 1×1 node `output` with respect to `wrt`.
    ///
    /// Handles without a path to `output` receive zero adjoints.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Gradients> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let last = output.0;
        let mut requires = vec![false; last + 1];
        for &w in wrt {
            if w.0 <= last {
                requires[w.0] = true;
            }
        }
        for i in 0..=last {
            if !requires[i] {
                requires[i] = self.nodes[i].op.parents().iter().any(|p| requires[p.0]);
            }
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; last + 1];
        adj[last] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=last).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &requires, &mut adj);
            adj[i] = Some(g);
        }
        let grads = wrt
            .iter()
            .map(|&w| {
                let g = adj
                    .get(w.0)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| DMatrix::zeros(self.value(w).nrows(), self.value(w).ncols()));
                (w, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &DMatrix<f64>, req: &[bool], adj: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, delta: DMatrix<f64>| {
            if !req[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => *a += delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if req[a.0] {
                    acc(*a, g.component_mul(val(*b)));
                }
                if req[b.0] {
                    acc(*b, g.component_mul(val(*a)));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if req[a.0] {
                    acc(*a, g.component_div(vb));
                }
                if req[b.0] {
                    let d = DMatrix::from_fn(g.nrows(), g.ncols(), |r, c| {
                        -g[(r, c)] * y[(r, c)] / vb[(r, c)]
                    });
                    acc(*b, d);
                }
            }
            Op::Neg(x) => acc(*x, -g),
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::MatMul(a, b) => {
                if req[a.0] {
                    acc(*a, g * val(*b).transpose());
                }
                if req[b.0] {
                    acc(*b, val(*a).transpose() * g);
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Exp(x) => acc(*x, g.component_mul(y)),
            Op::Log(x) => acc(*x, g.component_div(val(*x))),
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })),
            Op::Softplus(x) => acc(*x, g.zip_map(val(*x), |gi, xi| gi * sigmoid(xi))),
            Op::Sqrt(x) => acc(
                *x,
                g.zip_map(y, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 }),
            ),
            Op::SoftmaxRows(x) => {
                let mut d = DMatrix::zeros(y.nrows(), y.ncols());
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| g[(r, c)] * y[(r, c)]).sum();
                    for c in 0..y.ncols() {
                        d[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Trace(x) => {
                let n = val(*x).nrows();
                acc(*x, DMatrix::identity(n, n) * g[(0, 0)]);
            }
            Op::Cholesky(a) => acc(*a, cholesky_adjoint(y, g)),
            Op::TriSolve { l, b, transpose } => {
                let lv = val(*l);
                if *transpose {
                    // X = L⁻ᵀB: B̄ = L⁻¹X̄, L̄ = -tril(X B̄ᵀ)
                    let bbar = linalg::solve_lower(lv, g);
                    if req[l.0] {
                        acc(*l, -linalg::tril(&(y * bbar.transpose())));
                    }
                    acc(*b, bbar);
                } else {
                    // X = L⁻¹B: B̄ = L⁻ᵀX̄, L̄ = -tril(B̄ Xᵀ)
                    let bbar = linalg::solve_lower_transpose(lv, g);
                    if req[l.0] {
                        acc(*l, -linalg::tril(&(&bbar * y.transpose())));
                    }
                    acc(*b, bbar);
                }
            }
            Op::LogDet { a, chol } => acc(*a, linalg::inverse_from_cholesky(chol) * g[(0, 0)]),
            Op::Slice { x, row, col } => {
                let (r, c) = val(*x).shape();
                let mut d = DMatrix::zeros(r, c);
                d.view_mut((*row, *col), g.shape()).copy_from(g);
                acc(*x, d);
            }
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let piece = match axis {
                        Axis::Rows => g.view((off, 0), (r, c)).into_owned(),
                        Axis::Cols => g.view((0, off), (r, c)).into_owned(),
                    };
                    off += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                    acc(p, piece);
                }
            }
            Op::MulScalar { x, s } => {
                if req[x.0] {
                    acc(*x, g * val(*s)[(0, 0)]);
                }
                if req[s.0] {
                    let d = g.component_mul(val(*x)).sum();
                    acc(*s, DMatrix::from_element(1, 1, d));
                }
            }
            Op::BroadcastRows(x) => {
                let d = DMatrix::from_fn(1, g.ncols(), |_, c| g.column(c).sum());
                acc(*x, d);
            }
            Op::BroadcastCols(x) => {
                let d = DMatrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                acc(*x, d);
            }
            Op::Gather { x, index } => {
                let (r, c) = val(*x).shape();
                let mut d = DMatrix::<f64>::zeros(r, c);
                {
                    let flat = d.as_mut_slice();
                    for (j, &src) in index.iter().enumerate() {
                        flat[src] += g.as_slice()[j];
                    }
                }
                acc(*x, d);
            }
            Op::BlockColSum { x, block } => {
                let (r, c) = val(*x).shape();
                let d = DMatrix::from_fn(r, c, |i, j| g[(i, j / block)]);
                acc(*x, d);
            }
            Op::Map { x, deriv } => acc(*x, g.component_mul(deriv)),
            Op::Map2 { a, b, da, db } => {
                if req[a.0] {
                    acc(*a, g.component_mul(da));
                }
                if req[b.0] {
                    acc(*b, g.component_mul(db));
                }
            }
            Op::PairDist { a, b, squared } => {
                let (va, vb) = (val(*a), val(*b));
                let d = va.ncols();
                let mut ga = DMatrix::zeros(va.nrows(), d);
                let mut gb = DMatrix::zeros(vb.nrows(), d);
                for i in 0..va.nrows() {
                    for j in 0..vb.nrows() {
                        let w = if *squared {
                            2.0 * g[(i, j)]
                        } else if y[(i, j)] > 0.0 {
                            g[(i, j)] / y[(i, j)]
                        } else {
                            0.0
                        };
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = va[(i, k)] - vb[(j, k)];
                            ga[(i, k)] += w * diff;
                            gb[(j, k)] -= w * diff;
                        }
                    }
                }
                if a == b {
                    acc(*a, ga + gb);
                } else {
                    acc(*a, ga);
                    acc(*b, gb);
                }
            }
        }
    }
}

/// Adjoint of `L = chol(A)` returned in symmetric form:
/// `Ā = ½(S + Sᵀ)`, `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, with `Φ` taking the lower
/// triangle and halving the diagonal.
fn cholesky_adjoint(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> DMatrix<f64> {
    let lbar = linalg::tril(lbar);
    let mut p = linalg::tril(&(l.transpose() * &lbar));
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    let a1 = linalg::solve_lower_transpose(l, &p);
    let s = linalg::solve_lower_transpose(l, &a1.transpose()).transpose();
    linalg::symmetrize(&s)
}
