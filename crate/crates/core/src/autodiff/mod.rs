//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Tape`] as a node. Calling [`Tape::grad_graph`]
//! walks the tape backwards and records the adjoint computation on the same
//! tape, built from the same primitives as the forward pass. The returned
//! gradients are therefore ordinary nodes and can be differentiated again,
//! which is what bi-level objectives such as gradient matching need.
//! [`Tape::grad`] does the same walk, reads the values out and discards the
//! adjoint nodes again.
//!
//! Broadcasting is limited to row vectors (`1 x c`), column vectors
//! (`r x 1`) and scalars (`1 x 1`) against a full matrix.
//!
//! ```
//! use demorec::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(array![[3.0]]);
//! let y = tape.square(x);
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0][[0, 0]], 6.0);
//! ```

pub mod gradcheck;
pub mod optim;
mod params;

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub use params::ParamSet;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    Sum(Var),
    ColSums(Var),
    RowSums(Var),
    BroadcastTo(Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    RowSlice(Var, usize),
    PadRows(Var, usize),
    ColSlice(Var, usize),
    PadCols(Var, usize),
    Gather(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
    FrobeniusSq(Var),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ConcatRows(a, b) => {
                [Some(*a), Some(*b)]
            }
            Scale(a, _)
            | Shift(a)
            | Sigmoid(a)
            | Relu(a)
            | LeakyRelu(a, _)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Square(a)
            | Softplus(a)
            | SoftmaxRows(a)
            | Sum(a)
            | ColSums(a)
            | RowSums(a)
            | BroadcastTo(a)
            | Transpose(a)
            | RowSlice(a, _)
            | PadRows(a, _)
            | ColSlice(a, _)
            | PadCols(a, _)
            | Gather(a, _)
            | Scatter(a, _)
            | FrobeniusSq(a) => [Some(*a), None],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let tracked = op
            .parents()
            .iter()
            .flatten()
            .any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    /// Copies the value of `v` into a fresh constant, cutting it off from
    /// differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn all_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let shape = match (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: (ra, ca),
                    rhs: (rb, cb),
                })
            }
        };
        let av = self.value(a).broadcast(shape).expect("checked shape");
        let bv = self.value(b).broadcast(shape).expect("checked shape");
        let mut out = Matrix::zeros(shape);
        Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(out)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_broadcast("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Per-column totals, `1 x c`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::ColSums(a))
    }

    /// Per-row totals, `r x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSums(a))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: (usize, usize)) -> Result<Var> {
        let value = self
            .value(a)
            .broadcast(shape)
            .ok_or(Error::Shape {
                op: "broadcast_to",
                lhs: self.shape(a),
                rhs: shape,
            })?
            .to_owned();
        Ok(self.push(value, Op::BroadcastTo(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shape");
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    /// Rows `start..end` of `a`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::Shape {
                op: "row_slice",
                lhs: (r, c),
                rhs: (start, end),
            });
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        Ok(self.push(value, Op::RowSlice(a, start)))
    }

    /// Columns `start..end` of `a`.
    pub fn col_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::Shape {
                op: "col_slice",
                lhs: (r, c),
                rhs: (start, end),
            });
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(value, Op::ColSlice(a, start)))
    }

    /// Embeds `a` into a zero matrix with `total` rows, starting at row `start`.
    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + r > total {
            return Err(Error::Shape {
                op: "pad_rows",
                lhs: (r, c),
                rhs: (start, total),
            });
        }
        let mut value = Matrix::zeros((total, c));
        value.slice_mut(s![start..start + r, ..]).assign(self.value(a));
        Ok(self.push(value, Op::PadRows(a, start)))
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + c > total {
            return Err(Error::Shape {
                op: "pad_cols",
                lhs: (r, c),
                rhs: (start, total),
            });
        }
        let mut value = Matrix::zeros((r, total));
        value.slice_mut(s![.., start..start + c]).assign(self.value(a));
        Ok(self.push(value, Op::PadCols(a, start)))
    }

    /// Row `k` of the output is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: (r, c),
                rhs: (bad, 0),
            });
        }
        let value = self.value(a).select(Axis(0), index);
        Ok(self.push(value, Op::Gather(a, index.into())))
    }

    /// Adds row `k` of `a` into row `index[k]` of a `total x c` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, index: &[usize], total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != index.len() || index.iter().any(|&i| i >= total) {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: (r, c),
                rhs: (index.len(), total),
            });
        }
        let mut value = Matrix::zeros((total, c));
        for (k, &i) in index.iter().enumerate() {
            let src = self.nodes[a.0].value.row(k);
            let mut dst = value.row_mut(i);
            dst += &src;
        }
        Ok(self.push(value, Op::Scatter(a, index.into())))
    }

    /// Squared Frobenius norm, `1 x 1`.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum();
        self.push(Matrix::from_elem((1, 1), v), Op::FrobeniusSq(a))
    }

    /// Sums `g` down to `shape`, undoing a broadcast.
    fn reduce_to(&mut self, g: Var, shape: (usize, usize)) -> Var {
        let mut g = g;
        let (r, c) = self.shape(g);
        if shape.0 == 1 && r != 1 {
            g = self.col_sums(g);
        }
        if shape.1 == 1 && c != 1 {
            g = self.row_sums(g);
        }
        g
    }

    /// Gradients of `loss` with respect to `params`, recorded on the tape so
    /// they can themselves be differentiated. Parameters that `loss` does not
    /// depend on get an explicit zero constant.
    pub fn grad_graph(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Var>> {
        let adjoints = self.backward(loss, params)?;
        Ok(params
            .iter()
            .map(|p| match adjoints.get(p.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*p);
                    self.constant(Matrix::zeros(shape))
                }
            })
            .collect())
    }

    /// Gradient values of `loss` with respect to `params`. The adjoint nodes
    /// are dropped from the tape afterwards.
    pub fn grad(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Matrix>> {
        let mark = self.nodes.len();
        let adjoints = self.backward(loss, params)?;
        let out = params
            .iter()
            .map(|p| match adjoints.get(p.0).copied().flatten() {
                Some(g) => self.value(g).clone(),
                None => Matrix::zeros(self.shape(*p)),
            })
            .collect();
        self.nodes.truncate(mark);
        Ok(out)
    }

    /// Entry point matching the `create_graph` convention of other engines.
    pub fn grad_of(&mut self, loss: Var, params: &ParamSet, create_graph: bool) -> Result<Grads> {
        let vars = params.vars();
        if create_graph {
            Ok(Grads::Graph(self.grad_graph(loss, &vars)?))
        } else {
            Ok(Grads::Values(self.grad(loss, &vars)?))
        }
    }

    fn backward(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Option<Var>>> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut on_path = vec![false; n];
        for p in params {
            if p.0 < n && self.nodes[p.0].tracked {
                on_path[p.0] = true;
            }
        }
        for i in 0..n {
            if !on_path[i] && self.nodes[i].tracked {
                on_path[i] = self.nodes[i].op.parents().iter().flatten().any(|p| on_path[p.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if !on_path[loss.0] {
            return Ok(adj);
        }
        adj[loss.0] = Some(self.scalar_constant(1.0));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            let wants = |v: &Var| on_path[v.0];
            use Op::*;
            match op {
                Leaf => {}
                MatMul(a, b) => {
                    if wants(&a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Add(a, b) => {
                    if wants(&a) {
                        let ga = self.reduce_to(g, self.shape(a));
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        let gb = self.reduce_to(g, self.shape(b));
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Sub(a, b) => {
                    if wants(&a) {
                        let ga = self.reduce_to(g, self.shape(a));
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        let ng = self.neg(g);
                        let gb = self.reduce_to(ng, self.shape(b));
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Mul(a, b) => {
                    if wants(&a) {
                        let t = self.mul(g, b)?;
                        let ga = self.reduce_to(t, self.shape(a));
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        let t = self.mul(g, a)?;
                        let gb = self.reduce_to(t, self.shape(b));
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Div(a, b) => {
                    let g_over_b = self.div(g, b)?;
                    if wants(&a) {
                        let ga = self.reduce_to(g_over_b, self.shape(a));
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        // d(a/b)/db = -(a/b)/b
                        let t = self.mul(g_over_b, out)?;
                        let t = self.neg(t);
                        let gb = self.reduce_to(t, self.shape(b));
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Shift(a) => self.accumulate(&mut adj, a, g)?,
                Sigmoid(a) => {
                    let one_minus = {
                        let n = self.neg(out);
                        self.shift(n, 1.0)
                    };
                    let local = self.mul(out, one_minus)?;
                    let ga = self.mul(g, local)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Relu(a) => {
                    let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    let ga = self.mul(g, mask)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                LeakyRelu(a, slope) => {
                    let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    let mask = self.constant(mask);
                    let ga = self.mul(g, mask)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Exp(a) => {
                    let ga = self.mul(g, out)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Log(a) => {
                    let ga = self.div(g, a)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Sqrt(a) => {
                    let half = self.scale(g, 0.5);
                    let ga = self.div(half, out)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let ga = self.mul(g, two_a)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Softplus(a) => {
                    let s = self.sigmoid(a);
                    let ga = self.mul(g, s)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                SoftmaxRows(a) => {
                    let gy = self.mul(g, out)?;
                    let dot = self.row_sums(gy);
                    let centered = self.sub(g, dot)?;
                    let ga = self.mul(out, centered)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Sum(a) | ColSums(a) | RowSums(a) => {
                    let shape = self.shape(a);
                    let ga = self.broadcast_to(g, shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                BroadcastTo(a) => {
                    let ga = self.reduce_to(g, self.shape(a));
                    self.accumulate(&mut adj, a, ga)?;
                }
                Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adj, a, ga)?;
                }
                ConcatRows(a, b) => {
                    let ra = self.shape(a).0;
                    let rb = self.shape(b).0;
                    if wants(&a) {
                        let ga = self.row_slice(g, 0, ra)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(&b) {
                        let gb = self.row_slice(g, ra, ra + rb)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                RowSlice(a, start) => {
                    let total = self.shape(a).0;
                    let ga = self.pad_rows(g, start, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                PadRows(a, start) => {
                    let r = self.shape(a).0;
                    let ga = self.row_slice(g, start, start + r)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                ColSlice(a, start) => {
                    let total = self.shape(a).1;
                    let ga = self.pad_cols(g, start, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                PadCols(a, start) => {
                    let c = self.shape(a).1;
                    let ga = self.col_slice(g, start, start + c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Gather(a, index) => {
                    let total = self.shape(a).0;
                    let ga = self.scatter_rows(g, &index, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Scatter(a, index) => {
                    let ga = self.gather_rows(g, &index)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                FrobeniusSq(a) => {
                    let two_a = self.scale(a, 2.0);
                    let ga = self.mul(two_a, g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
            }
        }
        Ok(adj)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) -> Result<()> {
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }
}

/// Result of [`Tape::grad_of`].
#[derive(Debug, Clone)]
pub enum Grads {
    Values(Vec<Matrix>),
    Graph(Vec<Var>),
}

#[cfg(test)]
mod tests;
