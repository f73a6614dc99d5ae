//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Values live on a [`Tape`]; a [`Var`] is a cheap handle to one tape entry.
//! Every op checks shapes explicitly, and the only implicit expansion is
//! through [`Var::broadcast_row`] and [`Var::broadcast_col`].

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    RowSoftmax(usize),
    RowLogSumExp(usize),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    SoftBin(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of values and the ops that produced them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), x))
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Array2<f64>) -> Array2<f64>, op: Op) -> Var<'_> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].needs_grad)
        };
        self.push(value, op, needs)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>, op: Op) -> Var<'_> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value, &nodes[b].value), nodes[a].needs_grad || nodes[b].needs_grad)
        };
        self.push(value, op, needs)
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        self.nodes.borrow()[id].value.dim()
    }

    /// Gradients of the 1x1 `loss` with respect to every tape entry.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.dim() != (1, 1) {
            return Err(Error::ShapeMismatch { op: "backward", lhs: root.value.dim(), rhs: (1, 1) });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |target: usize, delta: Array2<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, &g / y);
                    let mut gb = g.clone();
                    Zip::from(&mut gb).and(x).and(y).for_each(|d, &x, &y| *d = -*d * x / (y * y));
                    acc(*b, gb);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g * &node.value),
                Op::Log(a) => acc(*a, g / val(*a)),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::RowSoftmax(a) => {
                    let s = &node.value;
                    let dots = (&g * s).sum_axis(Axis(1));
                    let mut d = g;
                    Zip::indexed(&mut d).for_each(|(i, j), x| *x = s[[i, j]] * (*x - dots[i]));
                    acc(*a, d);
                }
                Op::RowLogSumExp(a) => {
                    let x = val(*a);
                    let l = &node.value;
                    let d = Array2::from_shape_fn(x.dim(), |(i, j)| g[[i, 0]] * (x[[i, j]] - l[[i, 0]]).exp());
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::RowSums(a) => {
                    let dim = val(*a).dim();
                    acc(*a, Array2::from_shape_fn(dim, |(i, _)| g[[i, 0]]));
                }
                Op::ColSums(a) => {
                    let dim = val(*a).dim();
                    acc(*a, Array2::from_shape_fn(dim, |(_, j)| g[[0, j]]));
                }
                Op::BroadcastRow(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::BroadcastCol(a) => acc(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let dim = val(*a).dim();
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    acc(*a, Array2::from_shape_vec(dim, flat).expect("reshape keeps length"));
                }
                Op::SoftBin(a) => {
                    let x = val(*a)[[0, 0]];
                    let bins = node.value.ncols();
                    let d: f64 = (0..bins).map(|b| g[[0, b]] * softbin_slope(x, b, bins)).sum();
                    acc(*a, Array2::from_elem((1, 1), d));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients from one backward pass. Entries that the loss does not reach
/// read as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Array2<f64> {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Array2::zeros(v.shape()),
        }
    }
}

/// Triangular-kernel memberships of `x` in `bins` evenly spaced bins on [0, 1].
/// The memberships are nonnegative and sum to one.
pub fn softbin_values(x: f64, bins: usize) -> Vec<f64> {
    if bins == 1 {
        return vec![1.0];
    }
    // weights 1 - frac and frac on the two bracketing centres add to exactly 1
    let t = x.clamp(0.0, 1.0) * (bins - 1) as f64;
    let lo = (t.floor() as usize).min(bins - 2);
    let frac = t - lo as f64;
    let mut v = vec![0.0; bins];
    v[lo] = 1.0 - frac;
    v[lo + 1] = frac;
    v
}

fn softbin_slope(x: f64, b: usize, bins: usize) -> f64 {
    if bins == 1 || !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    let h = 1.0 / (bins - 1) as f64;
    let t = (x - b as f64 * h) / h;
    if t.abs() >= 1.0 {
        0.0
    } else if t > 0.0 || (t == 0.0 && x < 1.0) {
        // right-derivative at interior bin centres
        -1.0 / h
    } else {
        1.0 / h
    }
}

fn row_logsumexp(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), 1));
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out[[i, 0]] = m + s.ln();
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (l, r) = (self.shape(), other.shape());
        if l != r {
            return Err(Error::ShapeMismatch { op, lhs: l, rhs: r });
        }
        Ok(())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (l, r) = (self.shape(), other.shape());
        if l.1 != r.0 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: l, rhs: r });
        }
        Ok(self.tape.binary(self.id, other.id, |a, b| a.dot(b), Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        Ok(self.tape.binary(self.id, other.id, |a, b| a + b, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        Ok(self.tape.binary(self.id, other.id, |a, b| a - b, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        Ok(self.tape.binary(self.id, other.id, |a, b| a * b, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "div")?;
        Ok(self.tape.binary(self.id, other.id, |a, b| a / b, Op::Div(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a + c, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn row_softmax(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let l = row_logsumexp(a);
                Array2::from_shape_fn(a.dim(), |(i, j)| (a[[i, j]] - l[[i, 0]]).exp())
            },
            Op::RowSoftmax(self.id),
        )
    }

    /// `n x m -> n x 1` log-sum-exp of each row.
    pub fn row_logsumexp(self) -> Var<'t> {
        self.tape.unary(self.id, row_logsumexp, Op::RowLogSumExp(self.id))
    }

    /// `n x m -> 1 x m` log-sum-exp of each column.
    pub fn col_logsumexp(self) -> Var<'t> {
        self.t().row_logsumexp().t()
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, |a| Array2::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// `n x m -> n x 1`.
    pub fn row_sums(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::RowSums(self.id))
    }

    /// `n x m -> 1 x m`.
    pub fn col_sums(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)), Op::ColSums(self.id))
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_row(self, n: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh.0 != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_row", lhs: sh, rhs: (1, sh.1) });
        }
        Ok(self.tape.unary(self.id, |a| a.broadcast((n, sh.1)).expect("row").to_owned(), Op::BroadcastRow(self.id)))
    }

    /// Repeats an `n x 1` column `m` times.
    pub fn broadcast_col(self, m: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh.1 != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_col", lhs: sh, rhs: (sh.0, 1) });
        }
        Ok(self.tape.unary(
            self.id,
            |a| Array2::from_shape_fn((sh.0, m), |(i, _)| a[[i, 0]]),
            Op::BroadcastCol(self.id),
        ))
    }

    /// Adds a `1 x m` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let n = self.shape().0;
        self.add(row.broadcast_row(n)?)
    }

    /// Adds an `n x 1` column to every column.
    pub fn add_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let m = self.shape().1;
        self.add(col.broadcast_col(m)?)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if start > end || end > sh.1 {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: sh, rhs: (start, end) });
        }
        Ok(self.tape.unary(self.id, |a| a.slice(s![.., start..end]).to_owned(), Op::SliceCols(self.id, start)))
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh.0 * sh.1 != rows * cols {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: sh, rhs: (rows, cols) });
        }
        Ok(self.tape.unary(
            self.id,
            |a| Array2::from_shape_vec((rows, cols), a.iter().cloned().collect()).expect("length checked"),
            Op::Reshape(self.id),
        ))
    }

    /// Soft-bin code of a `1 x 1` value in `[0, 1]`, as a `1 x bins` row.
    pub fn softbin(self, bins: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh != (1, 1) || bins == 0 {
            return Err(Error::ShapeMismatch { op: "softbin", lhs: sh, rhs: (1, 1) });
        }
        Ok(self.tape.unary(
            self.id,
            |a| Array2::from_shape_vec((1, bins), softbin_values(a[[0, 0]], bins)).expect("bins"),
            Op::SoftBin(self.id),
        ))
    }
}

/// Column-wise concatenation of tensors with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::DimensionMismatch("concat of nothing".into()))?;
    let tape = first.tape;
    let rows = first.shape().0;
    for p in parts {
        if p.shape().0 != rows {
            return Err(Error::ShapeMismatch { op: "concat_cols", lhs: first.shape(), rhs: p.shape() });
        }
    }
    let (value, needs) = {
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        (v, parts.iter().any(|p| nodes[p.id].needs_grad))
    };
    Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs))
}

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Flat indices where the one-sided slopes disagree, i.e. the function is
    /// not smooth there. They are left out of `max_rel_err`.
    pub kinks: Vec<usize>,
    pub passed: bool,
}

/// Checks the gradient of the scalar function `f` at `x`. A central
/// difference cannot resolve slopes below `eps * |f| / h`, so that rounding
/// bound is subtracted from each discrepancy before it is scaled.
pub fn gradcheck<F>(f: F, x: &Array2<f64>, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |point: &Array2<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point.clone());
        Ok(f(&tape, v)?.item())
    };
    let analytic = {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let out = f(&tape, v)?;
        tape.backward(out)?.get(v)
    };
    let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let f0 = eval(x)?;
    let mut max_rel_err: f64 = 0.0;
    let mut kinks = Vec::new();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let h = 1e-5 * x[[i, j]].abs().max(1.0);
        let mut up = x.clone();
        up[[i, j]] += h;
        let mut down = x.clone();
        down[[i, j]] -= h;
        let (fu, fd) = (eval(&up)?, eval(&down)?);
        let fwd = (fu - f0) / h;
        let bwd = (f0 - fd) / h;
        let central = (fu - fd) / (2.0 * h);
        if (fwd - bwd).abs() > 1e-2 * central.abs().max(1.0) {
            kinks.push(idx);
            continue;
        }
        let a = analytic[[i, j]];
        let rounding = 2.0 * f64::EPSILON * fu.abs().max(fd.abs()).max(f0.abs()) / h;
        let denom = a.abs().max(central.abs()).max(1e-3 * gmax).max(1e-12);
        max_rel_err = max_rel_err.max(((a - central).abs() - rounding).max(0.0) / denom);
    }
    Ok(GradcheckReport { max_rel_err, kinks, passed: max_rel_err <= tol })
}
