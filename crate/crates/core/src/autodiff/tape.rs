use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Whether a tape accepts `create_graph = true` backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    FirstOrder,
    HigherOrder,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Expand(usize, Vec<usize>),
    Softmax(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>, usize),
    SumRows(usize),
    BroadcastRows(usize, usize),
    SumCols(usize),
    BroadcastCols(usize, usize),
    LogSoftmaxRows(usize),
    SelectPerRow(usize, Rc<[usize]>),
    ScatterPerRow(usize, Rc<[usize]>, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a)
            | Scale(a, _)
            | Transpose(a)
            | Relu(a)
            | Log(a)
            | Exp(a)
            | Sqrt(a)
            | Square(a)
            | Sum(a)
            | Mean(a)
            | Expand(a, _)
            | Softmax(a)
            | Gather(a, _)
            | Scatter(a, _, _)
            | SumRows(a)
            | BroadcastRows(a, _)
            | SumCols(a)
            | BroadcastCols(a, _)
            | LogSoftmaxRows(a)
            | SelectPerRow(a, _)
            | ScatterPerRow(a, _, _) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(..) => "neg",
            Scale(..) => "scalar-mul",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Relu(..) => "relu",
            Log(..) => "log",
            Exp(..) => "exp",
            Sqrt(..) => "sqrt",
            Square(..) => "square",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Expand(..) => "expand",
            Softmax(..) => "softmax",
            Gather(..) => "gather",
            Scatter(..) => "scatter",
            SumRows(..) => "sum-rows",
            BroadcastRows(..) => "broadcast-rows",
            SumCols(..) => "sum-cols",
            BroadcastCols(..) => "broadcast-cols",
            LogSoftmaxRows(..) => "log-softmax-rows",
            SelectPerRow(..) => "select-per-row",
            ScatterPerRow(..) => "scatter-per-row",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    no_grad_depth: usize,
}

/// Append-only record of a computation.
///
/// A tape is confined to one thread. Values flow in as leaves
/// ([`Tape::var`] / [`Tape::constant`]) and every operation on the resulting
/// [`Var`]s appends a node.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
    id: u64,
    mode: TapeMode,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}@{}({:?})", self.idx, self.tape.id, self.value())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(TapeMode::HigherOrder)
    }
}

impl Tape {
    pub fn new(mode: TapeMode) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), no_grad_depth: 0 })),
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            mode,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        let rg = self.inner.borrow().no_grad_depth == 0;
        self.push_node(value, Op::Leaf, rg)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Runs `f` with gradient recording disabled: every node created inside is
    /// a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.inner.borrow_mut().no_grad_depth += 1;
        let _guard = NoGradGuard(self);
        f()
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self.clone(), idx: inner.nodes.len() - 1 }
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[idx].value)
    }

    fn requires_grad_of(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].requires_grad
    }

    fn apply(&self, op: Op) -> Result<Var, AutodiffError> {
        let value = {
            let inner = self.inner.borrow();
            forward(&op, |i| Rc::clone(&inner.nodes[i].value))?
        };
        let rg = {
            let inner = self.inner.borrow();
            inner.no_grad_depth == 0 && op.parents().iter().any(|&p| inner.nodes[p].requires_grad)
        };
        Ok(self.push_node(value, op, rg))
    }

    fn check_owner(&self, v: &Var) -> Result<(), AutodiffError> {
        if v.tape.id != self.id {
            return Err(AutodiffError::ForeignTape);
        }
        Ok(())
    }

    /// Generic entry point naming the operation by kind.
    pub fn record(&self, kind: OpKind, inputs: &[&Var]) -> Result<Var, AutodiffError> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let want = kind.arity();
        if inputs.len() != want {
            return Err(AutodiffError::Arity { op: kind.name(), expected: want, got: inputs.len() });
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => a.add(inputs[1]),
            OpKind::Sub => a.sub(inputs[1]),
            OpKind::Mul => a.mul(inputs[1]),
            OpKind::ScalarMul(k) => a.scale(k),
            OpKind::MatMul => a.matmul(inputs[1]),
            OpKind::Relu => a.relu(),
            OpKind::Log => a.log(),
            OpKind::Exp => a.exp(),
            OpKind::Sum => a.sum(),
            OpKind::Mean => a.mean(),
            OpKind::Softmax => a.softmax(),
            OpKind::GatherByPermutation(ref perm) => a.gather(perm),
            OpKind::Square => a.square(),
            OpKind::Sqrt => a.sqrt(),
        }
    }

    /// Re-executes every recorded node in order from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>, AutodiffError> {
        let inner = self.inner.borrow();
        let mut out: Vec<Rc<Tensor>> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = match node.op {
                Op::Leaf => Rc::clone(&node.value),
                ref op => Rc::new(forward(op, |i| Rc::clone(&out[i]))?),
            };
            out.push(v);
        }
        Ok(out.into_iter().map(|t| (*t).clone()).collect())
    }

    /// Values currently stored on the tape, in recording order.
    pub fn values(&self) -> Vec<Tensor> {
        self.inner.borrow().nodes.iter().map(|n| (*n.value).clone()).collect()
    }

    /// Whether `root` has a differentiable path back to `node`.
    pub fn depends_on(&self, root: &Var, node: &Var) -> bool {
        if root.tape.id != self.id || node.tape.id != self.id || node.idx > root.idx {
            return false;
        }
        let reach = self.reach_from(&[node.idx], root.idx);
        reach[root.idx]
    }

    fn reach_from(&self, sources: &[usize], upto: usize) -> Vec<bool> {
        let inner = self.inner.borrow();
        let mut reach = vec![false; upto + 1];
        for i in 0..=upto {
            let node = &inner.nodes[i];
            if !node.requires_grad {
                continue;
            }
            reach[i] = sources.contains(&i) || node.op.parents().iter().any(|&p| reach[p]);
        }
        reach
    }
}

struct NoGradGuard<'a>(&'a Tape);

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.0.inner.borrow_mut().no_grad_depth -= 1;
    }
}

/// Operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Relu,
    Log,
    Exp,
    Sum,
    Mean,
    Softmax,
    GatherByPermutation(Vec<usize>),
    Square,
    Sqrt,
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::GatherByPermutation(_) => "gather-by-permutation",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
        }
    }
}

fn shape_err(op: &Op, shapes: &[&Tensor]) -> AutodiffError {
    AutodiffError::Shape { op: op.name(), shapes: shapes.iter().map(|t| t.shape().to_vec()).collect() }
}

fn forward(op: &Op, val: impl Fn(usize) -> Rc<Tensor>) -> Result<Tensor, AutodiffError> {
    use Op::*;
    let binary_same = |a: usize, b: usize| -> Result<(Rc<Tensor>, Rc<Tensor>), AutodiffError> {
        let (x, y) = (val(a), val(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, &[&x, &y]));
        }
        Ok((x, y))
    };
    let want_rank = |t: &Tensor, r: usize| -> Result<(), AutodiffError> {
        if t.rank() != r {
            return Err(shape_err(op, &[t]));
        }
        Ok(())
    };
    Ok(match op {
        Leaf => unreachable!("leaves carry their own value"),
        Add(a, b) => {
            let (x, y) = binary_same(*a, *b)?;
            x.zip_map(&y, |p, q| p + q)
        }
        Sub(a, b) => {
            let (x, y) = binary_same(*a, *b)?;
            x.zip_map(&y, |p, q| p - q)
        }
        Mul(a, b) => {
            let (x, y) = binary_same(*a, *b)?;
            x.zip_map(&y, |p, q| p * q)
        }
        Div(a, b) => {
            let (x, y) = binary_same(*a, *b)?;
            x.zip_map(&y, |p, q| p / q)
        }
        Neg(a) => val(*a).map(|v| -v),
        Scale(a, k) => {
            let k = *k;
            val(*a).map(|v| k * v)
        }
        MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows() {
                return Err(shape_err(op, &[&x, &y]));
            }
            x.matmul(&y)
        }
        Transpose(a) => {
            let x = val(*a);
            want_rank(&x, 2)?;
            x.transpose()
        }
        Relu(a) => val(*a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Log(a) => val(*a).map(f64::ln),
        Exp(a) => val(*a).map(f64::exp),
        Sqrt(a) => val(*a).map(f64::sqrt),
        Square(a) => val(*a).map(|v| v * v),
        Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Mean(a) => {
            let x = val(*a);
            if x.is_empty() {
                return Err(shape_err(op, &[&x]));
            }
            let inv = 1.0 / x.len() as f64;
            Tensor::scalar(x.data().iter().sum::<f64>() * inv)
        }
        Expand(a, shape) => {
            let x = val(*a);
            if x.len() != 1 {
                return Err(shape_err(op, &[&x]));
            }
            Tensor::filled(shape, x.item())
        }
        Softmax(a) => {
            let x = val(*a);
            want_rank(&x, 1)?;
            Tensor::vector(softmax(x.data()))
        }
        Gather(a, idx) => {
            let x = val(*a);
            want_rank(&x, 1)?;
            let n = x.len();
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(AutodiffError::Index { op: op.name(), index: bad, len: n });
            }
            Tensor::vector(idx.iter().map(|&i| x.data()[i]).collect())
        }
        Scatter(a, idx, n) => {
            let x = val(*a);
            if x.rank() != 1 || x.len() != idx.len() {
                return Err(shape_err(op, &[&x]));
            }
            let mut out = vec![0.0; *n];
            for (&i, &v) in idx.iter().zip(x.data()) {
                if i >= *n {
                    return Err(AutodiffError::Index { op: op.name(), index: i, len: *n });
                }
                out[i] += v;
            }
            Tensor::vector(out)
        }
        SumRows(a) => {
            let x = val(*a);
            want_rank(&x, 2)?;
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
        BroadcastRows(a, r) => {
            let x = val(*a);
            want_rank(&x, 1)?;
            let c = x.len();
            let mut out = Vec::with_capacity(r * c);
            for _ in 0..*r {
                out.extend_from_slice(x.data());
            }
            Tensor::matrix(*r, c, out)
        }
        SumCols(a) => {
            let x = val(*a);
            want_rank(&x, 2)?;
            Tensor::vector((0..x.rows()).map(|i| x.row(i).iter().sum()).collect())
        }
        BroadcastCols(a, c) => {
            let x = val(*a);
            want_rank(&x, 1)?;
            let mut out = Vec::with_capacity(x.len() * c);
            for &v in x.data() {
                out.extend(std::iter::repeat_n(v, *c));
            }
            Tensor::matrix(x.len(), *c, out)
        }
        LogSoftmaxRows(a) => {
            let x = val(*a);
            want_rank(&x, 2)?;
            let mut out = Vec::with_capacity(x.len());
            for i in 0..x.rows() {
                let row = x.row(i);
                let lse = log_sum_exp(row);
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::matrix(x.rows(), x.cols(), out)
        }
        SelectPerRow(a, labels) => {
            let x = val(*a);
            if x.rank() != 2 || x.rows() != labels.len() {
                return Err(shape_err(op, &[&x]));
            }
            let c = x.cols();
            let mut out = Vec::with_capacity(labels.len());
            for (i, &l) in labels.iter().enumerate() {
                if l >= c {
                    return Err(AutodiffError::Index { op: op.name(), index: l, len: c });
                }
                out.push(x.data()[i * c + l]);
            }
            Tensor::vector(out)
        }
        ScatterPerRow(a, labels, c) => {
            let x = val(*a);
            if x.rank() != 1 || x.len() != labels.len() {
                return Err(shape_err(op, &[&x]));
            }
            let mut out = vec![0.0; labels.len() * c];
            for (i, (&l, &v)) in labels.iter().zip(x.data()).enumerate() {
                if l >= *c {
                    return Err(AutodiffError::Index { op: op.name(), index: l, len: *c });
                }
                out[i * c + l] = v;
            }
            Tensor::matrix(labels.len(), *c, out)
        }
    })
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable descending order: ties keep the lower original index first.
pub fn argsort_desc(x: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    perm
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $variant:ident) => {
        $(#[$m])*
        pub fn $name(&self) -> Result<Var, AutodiffError> {
            self.tape.apply(Op::$variant(self.idx))
        }
    };
}

macro_rules! binary {
    ($name:ident, $variant:ident) => {
        pub fn $name(&self, other: &Var) -> Result<Var, AutodiffError> {
            self.tape.check_owner(other)?;
            self.tape.apply(Op::$variant(self.idx, other.idx))
        }
    };
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.idx)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.idx)
    }

    binary!(add, Add);
    binary!(sub, Sub);
    binary!(mul, Mul);
    binary!(div, Div);
    binary!(matmul, MatMul);
    unary!(neg, Neg);
    unary!(transpose, Transpose);
    unary!(relu, Relu);
    unary!(log, Log);
    unary!(exp, Exp);
    unary!(sqrt, Sqrt);
    unary!(square, Square);
    unary!(
        /// Sum of all elements to a scalar.
        sum, Sum
    );
    unary!(mean, Mean);
    unary!(
        /// Softmax over a rank-1 vector.
        softmax, Softmax
    );
    unary!(
        /// Column sums of a matrix (`r×c -> c`).
        sum_rows, SumRows
    );
    unary!(
        /// Row sums of a matrix (`r×c -> r`).
        sum_cols, SumCols
    );
    unary!(log_softmax_rows, LogSoftmaxRows);

    pub fn scale(&self, k: f64) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::Scale(self.idx, k))
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::Expand(self.idx, shape.to_vec()))
    }

    /// `out[i] = self[idx[i]]` for a rank-1 node.
    pub fn gather(&self, idx: &[usize]) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::Gather(self.idx, idx.into()))
    }

    /// Adjoint of [`Var::gather`]: accumulates `self[i]` into slot `idx[i]` of a length-`n` zero vector.
    pub fn scatter(&self, idx: &[usize], n: usize) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::Scatter(self.idx, idx.into(), n))
    }

    pub fn broadcast_rows(&self, rows: usize) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::BroadcastRows(self.idx, rows))
    }

    pub fn broadcast_cols(&self, cols: usize) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::BroadcastCols(self.idx, cols))
    }

    /// `out[i] = self[i, labels[i]]`.
    pub fn select_per_row(&self, labels: &[usize]) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::SelectPerRow(self.idx, labels.into()))
    }

    pub fn scatter_per_row(&self, labels: &[usize], cols: usize) -> Result<Var, AutodiffError> {
        self.tape.apply(Op::ScatterPerRow(self.idx, labels.into(), cols))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var, AutodiffError> {
        let shape = self.shape();
        if shape.len() != 2 || row.shape() != [shape[1]] {
            return Err(AutodiffError::Shape { op: "add-row", shapes: vec![shape, row.shape()] });
        }
        self.add(&row.broadcast_rows(shape[0])?)
    }

    /// Sorts a vector from largest to smallest.
    ///
    /// The permutation is a constant under differentiation, so the gradient
    /// of `sorted` with respect to `self` is the permutation matrix.
    pub fn sort_desc(&self) -> Result<(Var, Vec<usize>), AutodiffError> {
        let v = self.value();
        if v.rank() != 1 {
            return Err(AutodiffError::Shape { op: "sort-desc", shapes: vec![v.shape().to_vec()] });
        }
        let perm = argsort_desc(v.data());
        Ok((self.gather(&perm)?, perm))
    }

    /// Same value, no gradient path.
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value()).clone())
    }

    /// Vector-Jacobian product for this node given upstream gradient `g`.
    /// Only parents flagged in `need` receive a contribution.
    fn vjp(&self, g: &Var, need: impl Fn(usize) -> bool) -> Result<Vec<(usize, Var)>, AutodiffError> {
        use Op::*;
        let t = &self.tape;
        let op = t.inner.borrow().nodes[self.idx].op.clone();
        let node = |i: usize| Var { tape: t.clone(), idx: i };
        let out = self;
        let mut res = Vec::with_capacity(2);
        match op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    res.push((a, g.clone()));
                }
                if need(b) {
                    res.push((b, g.clone()));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    res.push((a, g.clone()));
                }
                if need(b) {
                    res.push((b, g.neg()?));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    res.push((a, g.mul(&node(b))?));
                }
                if need(b) {
                    res.push((b, g.mul(&node(a))?));
                }
            }
            Div(a, b) => {
                let gb = g.div(&node(b))?;
                if need(b) {
                    res.push((b, gb.mul(out)?.neg()?));
                }
                if need(a) {
                    res.push((a, gb));
                }
            }
            Neg(a) => res.push((a, g.neg()?)),
            Scale(a, k) => res.push((a, g.scale(k)?)),
            MatMul(a, b) => {
                if need(a) {
                    res.push((a, g.matmul(&node(b).transpose()?)?));
                }
                if need(b) {
                    res.push((b, node(a).transpose()?.matmul(g)?));
                }
            }
            Transpose(a) => res.push((a, g.transpose()?)),
            Relu(a) => {
                let mask = node(a).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                res.push((a, g.mul(&t.constant(mask))?));
            }
            Log(a) => res.push((a, g.div(&node(a))?)),
            Exp(a) => res.push((a, g.mul(out)?)),
            Sqrt(a) => res.push((a, g.scale(0.5)?.div(out)?)),
            Square(a) => res.push((a, g.mul(&node(a))?.scale(2.0)?)),
            Sum(a) => res.push((a, g.expand(&node(a).shape())?)),
            Mean(a) => {
                let x = node(a);
                let n = x.value().len();
                res.push((a, g.scale(1.0 / n as f64)?.expand(&x.shape())?));
            }
            Expand(a, _) => {
                let s = g.sum()?;
                let target = node(a).shape();
                res.push((a, if target.is_empty() { s } else { s.expand(&target)? }));
            }
            Softmax(a) => {
                let shape = out.shape();
                let inner = g.mul(out)?.sum()?.expand(&shape)?;
                res.push((a, out.mul(&g.sub(&inner)?)?));
            }
            Gather(a, idx) => {
                let n = node(a).value().len();
                res.push((a, g.scatter(&idx, n)?));
            }
            Scatter(a, idx, _) => res.push((a, g.gather(&idx)?)),
            SumRows(a) => {
                let r = node(a).shape()[0];
                res.push((a, g.broadcast_rows(r)?));
            }
            BroadcastRows(a, _) => res.push((a, g.sum_rows()?)),
            SumCols(a) => {
                let c = node(a).shape()[1];
                res.push((a, g.broadcast_cols(c)?));
            }
            BroadcastCols(a, _) => res.push((a, g.sum_cols()?)),
            LogSoftmaxRows(a) => {
                let c = out.shape()[1];
                let p = out.exp()?;
                res.push((a, g.sub(&p.mul(&g.sum_cols()?.broadcast_cols(c)?)?)?));
            }
            SelectPerRow(a, labels) => {
                let c = node(a).shape()[1];
                res.push((a, g.scatter_per_row(&labels, c)?));
            }
            ScatterPerRow(a, labels, _) => res.push((a, g.select_per_row(&labels)?)),
        }
        Ok(res)
    }
}

/// Reverse-mode gradients of scalar `root` with respect to each of `wrt`.
///
/// With `create_graph` the returned nodes are themselves recorded and can be
/// differentiated again; otherwise they are constants. A `wrt` node with no
/// path from `root` receives zeros.
pub fn backward(root: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, AutodiffError> {
    let tape = root.tape.clone();
    if create_graph && tape.mode == TapeMode::FirstOrder {
        return Err(AutodiffError::HigherOrderDisabled);
    }
    for w in wrt {
        tape.check_owner(w)?;
        if !w.requires_grad() {
            return Err(AutodiffError::Detached(w.idx));
        }
    }
    let root_val = root.value();
    if root_val.len() != 1 {
        return Err(AutodiffError::NonScalarRoot(root_val.shape().to_vec()));
    }
    let zeros = |w: &Var| tape.constant(Tensor::zeros(w.value().shape()));
    let sources: Vec<usize> = wrt.iter().map(|w| w.idx).filter(|&i| i <= root.idx).collect();
    if sources.is_empty() || !root.requires_grad() {
        return Ok(wrt.iter().map(zeros).collect());
    }
    let reach = tape.reach_from(&sources, root.idx);
    if !reach[root.idx] {
        return Ok(wrt.iter().map(zeros).collect());
    }

    let run = || -> Result<Vec<Var>, AutodiffError> {
        let mut grads: Vec<Option<Var>> = vec![None; root.idx + 1];
        let mut found: Vec<Option<Var>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(tape.constant(Tensor::filled(root_val.shape(), 1.0)));
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !reach[i] {
                continue;
            }
            if sources.contains(&i) {
                found[i] = Some(g.clone());
            }
            let this = Var { tape: tape.clone(), idx: i };
            for (p, contrib) in this.vjp(&g, |p| reach[p])? {
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match found.get(w.idx).and_then(|g| g.clone()) {
                Some(g) => g,
                None => zeros(w),
            })
            .collect())
    };
    if create_graph {
        run()
    } else {
        tape.no_grad(run)
    }
}
