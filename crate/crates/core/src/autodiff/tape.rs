//! Wengert tape with reverse-mode differentiation.
//!
//! Backward rules are themselves expressed as tape operations, so a gradient
//! produced by [`Tape::grad_graph`] is an ordinary node that can be
//! differentiated again (double backprop). [`Tape::grad`] runs the same
//! rules and then truncates the tape back to where it started.

use std::sync::Arc;

use super::param::Parameter;
use super::sparse::SparseRows;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mutation hook for checking that the gradient checks catch a wrong
/// derivative. Scales the sigmoid derivative by `1 + e` on this thread.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local!(static SIGMOID: Cell<f64> = const { Cell::new(0.0) });

    pub fn set_sigmoid_grad_error(e: f64) {
        SIGMOID.with(|c| c.set(e));
    }

    pub(crate) fn sigmoid_grad_error() -> f64 {
        SIGMOID.with(Cell::get)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Log(Var),
    Recip(Var),
    Clip(Var, f64, f64),
    Maximum(Var, Var),
    /// Elementwise product with a constant.
    Mask(Var, Arc<Tensor>),
    Gather(Var, Arc<SparseRows>),
    Scatter(Var, Arc<SparseRows>),
    Concat(Vec<Var>),
    /// `(input, start, len)`
    SliceCols(Var, usize, usize),
    /// `(input, start, total)`
    PadCols(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    BroadcastRows(Var, usize),
    SumCols(Var),
    BroadcastCols(Var, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Square(..) => "elementwise_square",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Clip(..) => "clip",
            Op::Maximum(..) => "maximum",
            Op::Mask(..) => "mask",
            Op::Gather(..) => "gather_rows",
            Op::Scatter(..) => "scatter_rows",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Clip(a, ..)
            | Op::Mask(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::SliceCols(a, ..)
            | Op::PadCols(a, ..)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rank2(op: &'static str, a: &Tensor) -> Result<()> {
    if a.rank() != 2 {
        return Err(Error::shape(op, a.shape(), &[0, 0]));
    }
    Ok(())
}

/// Forward value of `op` given a lookup for its inputs' values.
fn compute<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let name = op.name();
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(*a).zip_map(val(*b), name, |x, y| x + y)?,
        Op::Sub(a, b) => val(*a).zip_map(val(*b), name, |x, y| x - y)?,
        Op::Mul(a, b) => val(*a).zip_map(val(*b), name, |x, y| x * y)?,
        Op::Maximum(a, b) => val(*a).zip_map(val(*b), name, f64::max)?,
        Op::Scale(a, c) => val(*a).map(|x| c * x),
        Op::AddScalar(a, c) => val(*a).map(|x| x + c),
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            rank2(name, a)?;
            rank2(name, b)?;
            a.matmul(b).map_err(|_| Error::shape(name, a.shape(), b.shape()))?
        }
        Op::Transpose(a) => {
            rank2(name, val(*a))?;
            val(*a).transpose()
        }
        Op::Sigmoid(a) => val(*a).map(sigmoid),
        Op::Tanh(a) => val(*a).map(f64::tanh),
        Op::Relu(a) => val(*a).map(|x| x.max(0.0)),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Log(a) => val(*a).map(f64::ln),
        Op::Recip(a) => val(*a).map(f64::recip),
        Op::Clip(a, lo, hi) => val(*a).map(|x| x.clamp(*lo, *hi)),
        Op::Mask(a, m) => val(*a).zip_map(m, name, |x, y| x * y)?,
        Op::Gather(a, s) => {
            let t = val(*a);
            rank2(name, t)?;
            if t.rows() != s.source_rows() {
                return Err(Error::shape(name, t.shape(), &[s.source_rows(), t.cols()]));
            }
            Tensor::new(vec![s.out_rows(), t.cols()], s.gather(t.data(), t.cols()))?
        }
        Op::Scatter(a, s) => {
            let t = val(*a);
            rank2(name, t)?;
            if t.rows() != s.out_rows() {
                return Err(Error::shape(name, t.shape(), &[s.out_rows(), t.cols()]));
            }
            Tensor::new(vec![s.source_rows(), t.cols()], s.scatter(t.data(), t.cols()))?
        }
        Op::Concat(parts) => {
            let first = val(*parts.first().ok_or_else(|| Error::validation("concat", "no inputs"))?);
            let rows = first.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = val(*p);
                rank2(name, t)?;
                if t.rows() != rows {
                    return Err(Error::shape(name, first.shape(), t.shape()));
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(*p).row_slice(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        }
        Op::SliceCols(a, start, len) => {
            let t = val(*a);
            rank2(name, t)?;
            if start + len > t.cols() || *len == 0 {
                return Err(Error::shape(name, t.shape(), &[t.rows(), start + len]));
            }
            let mut data = Vec::with_capacity(t.rows() * len);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row_slice(r)[*start..start + len]);
            }
            Tensor::new(vec![t.rows(), *len], data)?
        }
        Op::PadCols(a, start, total) => {
            let t = val(*a);
            rank2(name, t)?;
            if start + t.cols() > *total {
                return Err(Error::shape(name, t.shape(), &[t.rows(), *total]));
            }
            let mut out = Tensor::zeros(t.rows(), *total);
            for r in 0..t.rows() {
                out.row_slice_mut(r)[*start..start + t.cols()].copy_from_slice(t.row_slice(r));
            }
            out
        }
        Op::SumAll(a) => Tensor::scalar(val(*a).sum()),
        Op::MeanAll(a) => Tensor::scalar(val(*a).sum() / val(*a).len() as f64),
        Op::SumRows(a) => {
            let t = val(*a);
            rank2(name, t)?;
            let mut out = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        }
        Op::BroadcastRows(a, n) => {
            let t = val(*a);
            if t.rank() != 2 || t.rows() != 1 {
                return Err(Error::shape(name, t.shape(), &[1, t.cols()]));
            }
            Tensor::new(vec![*n, t.cols()], t.data().repeat(*n))?
        }
        Op::SumCols(a) => {
            let t = val(*a);
            rank2(name, t)?;
            Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
        }
        Op::BroadcastCols(a, n) => {
            let t = val(*a);
            if t.rank() != 2 || t.cols() != 1 {
                return Err(Error::shape(name, t.shape(), &[t.rows(), 1]));
            }
            let data = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, *n)).collect();
            Tensor::new(vec![t.rows(), *n], data)?
        }
    };
    if !out.is_finite() {
        return Err(Error::validation(format!("`{name}` output"), "non-finite value"));
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::validation("leaf", "non-finite value"));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers a parameter; only trainable parameters receive gradients.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.leaf_shared(p.shared(), p.trainable())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// Rectifier; its derivative at exactly 0 is taken as 0 and its second
    /// derivative is 0 everywhere.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Recip(a))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clip(a, lo, hi))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Maximum(a, b))
    }

    pub fn mask(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        self.push(Op::Mask(a, mask))
    }

    /// Weighted row gather from a `[rows, cols]` table.
    pub fn gather_rows(&mut self, table: Var, sel: Arc<SparseRows>) -> Result<Var> {
        self.push(Op::Gather(table, sel))
    }

    /// Row `index` of a matrix, as a `[1, cols]` node.
    pub fn gather_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let rows = self.value(table).rows();
        let sel = SparseRows::select(&[index], rows)?;
        self.gather_rows(table, Arc::new(sel))
    }

    /// Mean of the listed rows per output row (empty list gives zeros).
    pub fn avg_pool_rows(&mut self, table: Var, lists: &[&[usize]]) -> Result<Var> {
        let rows = self.value(table).rows();
        let sel = SparseRows::average(lists, rows)?;
        self.gather_rows(table, Arc::new(sel))
    }

    pub fn scatter_rows(&mut self, a: Var, sel: Arc<SparseRows>) -> Result<Var> {
        self.push(Op::Scatter(a, sel))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        self.push(Op::PadCols(a, start, total))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(a, n))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(a, n))
    }

    /// `x · W + b` for `x: [B, in]`, `W: [in, out]`, `b: [1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let rows = self.value(y).rows();
                let b = self.broadcast_rows(b, rows)?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Row-wise inner products of two `[B, m]` nodes, giving `[B, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_cols(p)
    }

    /// Sum of all elements of `a ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c)?;
        let p = self.mul(a, c)?;
        self.sum(p)
    }

    fn zero_like(&mut self, v: Var) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        let n = shape.iter().product();
        self.constant(Tensor::new(shape, vec![0.0; n])?)
    }

    /// Vector-Jacobian products of node `v` for upstream gradient `g`,
    /// recorded as new nodes. Only inputs that require grad are returned.
    fn backward_rule(&mut self, v: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[v.0].op.clone();
        let needs = |t: &Tape, x: Var| t.nodes[x.0].requires_grad;
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    out.push((a, g));
                }
                if needs(self, b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    out.push((a, g));
                }
                if needs(self, b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(self, b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::MatMul(a, b) => {
                if needs(self, a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if needs(self, b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Sigmoid(a) => {
                // s (1 - s)
                let one_minus = self.scale(v, -1.0)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let mut d = self.mul(v, one_minus)?;
                let e = fault::sigmoid_grad_error();
                if e != 0.0 {
                    d = self.scale(d, 1.0 + e)?;
                }
                out.push((a, self.mul(g, d)?));
            }
            Op::Tanh(a) => {
                // 1 - y^2
                let sq = self.square(v)?;
                let d = self.scale(sq, -1.0)?;
                let d = self.add_scalar(d, 1.0)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Relu(a) => {
                let m = Arc::new(self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                out.push((a, self.mask(g, m)?));
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                out.push((a, self.mul(g, two_a)?));
            }
            Op::Log(a) => {
                let r = self.recip(a)?;
                out.push((a, self.mul(g, r)?));
            }
            Op::Recip(a) => {
                // -1/x^2 = -(r^2)
                let sq = self.square(v)?;
                let d = self.scale(sq, -1.0)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Clip(a, lo, hi) => {
                let m = Arc::new(self.value(a).map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 }));
                out.push((a, self.mask(g, m)?));
            }
            Op::Maximum(a, b) => {
                let take_a =
                    Arc::new(
                        self.value(a)
                            .zip_map(self.value(b), "maximum", |x, y| if x >= y { 1.0 } else { 0.0 })?,
                    );
                if needs(self, a) {
                    out.push((a, self.mask(g, take_a.clone())?));
                }
                if needs(self, b) {
                    let take_b = Arc::new(take_a.map(|x| 1.0 - x));
                    out.push((b, self.mask(g, take_b)?));
                }
            }
            Op::Mask(a, m) => out.push((a, self.mask(g, m)?)),
            Op::Gather(a, s) => out.push((a, self.scatter_rows(g, s)?)),
            Op::Scatter(a, s) => out.push((a, self.gather_rows(g, s)?)),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    if needs(self, p) {
                        out.push((p, self.slice_cols(g, start, w)?));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, _) => {
                let total = self.value(a).cols();
                out.push((a, self.pad_cols(g, start, total)?));
            }
            Op::PadCols(a, start, _) => {
                let len = self.value(a).cols();
                out.push((a, self.slice_cols(g, start, len)?));
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                let n = (rows * cols) as f64;
                let g = if matches!(op, Op::MeanAll(_)) {
                    self.scale(g, 1.0 / n)?
                } else {
                    g
                };
                let gc = self.broadcast_cols(g, cols)?;
                out.push((a, self.broadcast_rows_any(gc, rows)?));
            }
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                out.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a, _) => out.push((a, self.sum_rows(g)?)),
            Op::SumCols(a) => {
                let cols = self.value(a).cols();
                out.push((a, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(a, _) => out.push((a, self.sum_cols(g)?)),
        }
        Ok(out)
    }

    fn broadcast_rows_any(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 1 {
            Ok(a)
        } else {
            self.broadcast_rows(a, n)
        }
    }

    /// Reverse sweep from scalar `loss`; returns adjoint nodes for `wrt`
    /// (constant zeros where `loss` does not depend on them).
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::shape("grad (loss must be scalar)", ls, &[1, 1]));
        }
        let mut adj: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            let seed = Tensor::new(self.shape(loss).to_vec(), vec![1.0])?;
            adj[loss.0] = Some(self.constant(seed)?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            for (input, contrib) in self.backward_rule(Var(i), g)? {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => self.zero_like(w),
            })
            .collect()
    }

    /// Gradient values of scalar `loss` with respect to `wrt`; the tape is
    /// left as it was before the call.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self
            .grad_graph(loss, wrt)
            .map(|gs| gs.iter().map(|&g| self.value(g).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    /// Hessian-vector product `(d^2 loss / dx^2) v` by double backprop.
    pub fn hvp(&mut self, loss: Var, x: Var, v: &Tensor) -> Result<Tensor> {
        if self.shape(x) != v.shape() {
            return Err(Error::shape("hvp", self.shape(x), v.shape()));
        }
        let mark = self.nodes.len();
        let result = (|| {
            let g = self.grad_graph(loss, &[x])?[0];
            let gv = self.dot_const(g, v.clone())?;
            Ok(self.grad(gv, &[x])?.remove(0))
        })();
        self.nodes.truncate(mark);
        result
    }

    /// Re-executes every recorded operation from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => Arc::new(compute(op, |x| &values[x.0])?),
            };
            values.push(v);
        }
        Ok(values.into_iter().map(Arc::unwrap_or_clone).collect())
    }

    /// True if a replay reproduces every node value bitwise.
    pub fn replay_matches(&self) -> Result<bool> {
        Ok(self
            .replay()?
            .iter()
            .zip(&self.nodes)
            .all(|(r, n)| r.bitwise_eq(&n.value)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0])).unwrap();
        let s = t.sigmoid(x).unwrap();
        let h = t.tanh(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        assert_eq!(t.value(h).data(), &[0.0]);
    }

    #[test]
    fn gather_row_selects() {
        let mut t = Tape::new();
        let table = t.constant(m(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]])).unwrap();
        let r = t.gather_row(table, 1).unwrap();
        assert_eq!(t.value(r).data(), &[3., 4.]);
        assert!(matches!(t.gather_row(table, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3)).unwrap();
        let b = t.constant(Tensor::zeros(3, 2)).unwrap();
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"),
            "{err}"
        );
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1., 2., 3.]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.grad(l, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2., 4., 6.]);
    }

    #[test]
    fn grad_of_unused_leaf_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1., 2.]), true).unwrap();
        let y = t.leaf(Tensor::zeros(3, 2), true).unwrap();
        let l = t.sum(x).unwrap();
        let g = t.grad(l, &[y]).unwrap();
        assert_eq!(g[0], Tensor::zeros(3, 2));
    }

    #[test]
    fn grad_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1., 2.]), true).unwrap();
        assert!(t.grad(x, &[x]).is_err());
    }

    #[test]
    fn grad_leaves_tape_length_unchanged() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1., 2.]), true).unwrap();
        let s = t.sigmoid(x).unwrap();
        let l = t.sum(s).unwrap();
        let before = t.len();
        t.grad(l, &[x]).unwrap();
        assert_eq!(t.len(), before);
    }

    #[test]
    fn hvp_of_quadratic_form() {
        // 0.5 x^T A x with A = [[2,1],[1,3]]
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.3, -0.7]), true).unwrap();
        let a = t.constant(m(&[vec![2., 1.], vec![1., 3.]])).unwrap();
        let xa = t.matmul(x, a).unwrap();
        let q = t.row_dot(xa, x).unwrap();
        let l = t.scale(q, 0.5).unwrap();
        let h = t.hvp(l, x, &Tensor::row(vec![1., 0.])).unwrap();
        assert!((h.data()[0] - 2.0).abs() < 1e-12 && (h.data()[1] - 1.0).abs() < 1e-12);
        let z = t.hvp(l, x, &Tensor::row(vec![0., 0.])).unwrap();
        assert_eq!(z.data(), &[0., 0.]);
    }

    #[test]
    fn relu_second_derivative_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.5, -0.5, 0.0]), true).unwrap();
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        assert_eq!(t.grad(l, &[x]).unwrap()[0].data(), &[1., 0., 0.]);
        let h = t.hvp(l, x, &Tensor::row(vec![1., 1., 1.])).unwrap();
        assert_eq!(h.data(), &[0., 0., 0.]);
    }

    #[test]
    fn replay_is_bitwise() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.1, -0.2, 0.3]), true).unwrap();
        let w = t.leaf(m(&[vec![0.5], vec![-1.5], vec![2.0]]), true).unwrap();
        let z = t.matmul(x, w).unwrap();
        let p = t.sigmoid(z).unwrap();
        let l = t.log(p).unwrap();
        let _ = t.grad_graph(l, &[x, w]).unwrap();
        assert!(t.replay_matches().unwrap());
    }
}
