use std::fmt;
use std::sync::Arc;

use crate::error::AutodiffError;
use crate::matrix::Matrix;
use crate::Result;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An elementwise function together with its derivative, for closed-form
/// maps that are not worth a dedicated primitive.
#[derive(Clone, Copy)]
pub struct ElementFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl fmt::Debug for ElementFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElementFn({})", self.name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    LinComb(Arc<[(Var, f64)]>),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    PowI(Var, i32),
    PowF(Var, f64),
    Map(Var, ElementFn),
    Sum(Var),
    Gather(Var, Arc<[usize]>),
    VStack(Arc<[Var]>),
    HStack(Arc<[Var]>),
    Column(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Linear record of primitive operations and their values.
///
/// Leaves hold inputs and parameters; every other node is a pure function of
/// earlier nodes, so the record can be replayed or truncated back to a mark.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    held: usize,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape())
    } else if a.is_scalar() {
        Ok(b.shape())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

fn zip_broadcast(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    let n = shape.0 * shape.1;
    let data = match (a.len() == n, b.len() == n) {
        (true, true) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        (false, true) => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        (false, false) => vec![f(a.data()[0], b.data()[0])],
    };
    Matrix::new(shape.0, shape.1, data)
}

/// Forward evaluation shared by recording and replay.
fn evaluate<'a>(op: &Op, value_of: &dyn Fn(Var) -> &'a Matrix) -> Result<Matrix> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            let (a, b) = (value_of(*a), value_of(*b));
            zip_broadcast(a, b, broadcast_shape("add", a, b)?, |x, y| x + y)
        }
        Op::Sub(a, b) => {
            let (a, b) = (value_of(*a), value_of(*b));
            zip_broadcast(a, b, broadcast_shape("sub", a, b)?, |x, y| x - y)
        }
        Op::Mul(a, b) => {
            let (a, b) = (value_of(*a), value_of(*b));
            zip_broadcast(a, b, broadcast_shape("mul", a, b)?, |x, y| x * y)
        }
        Op::Div(a, b) => {
            let (a, b) = (value_of(*a), value_of(*b));
            zip_broadcast(a, b, broadcast_shape("div", a, b)?, |x, y| x / y)
        }
        Op::Neg(a) => value_of(*a).map(|x| -x),
        Op::Scale(a, c) => {
            let c = *c;
            value_of(*a).map(|x| c * x)
        }
        Op::Offset(a, c) => {
            let c = *c;
            value_of(*a).map(|x| x + c)
        }
        Op::LinComb(terms) => {
            let (first, c0) = terms[0];
            let first = value_of(first);
            let mut data: Vec<f64> = first.data().iter().map(|&x| c0 * x).collect();
            for &(v, c) in terms.iter().skip(1) {
                let m = value_of(v);
                if m.shape() != first.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "lin_comb",
                        left: first.shape(),
                        right: m.shape(),
                    });
                }
                for (o, &x) in data.iter_mut().zip(m.data()) {
                    *o += c * x;
                }
            }
            Matrix::new(first.rows(), first.cols(), data)
        }
        Op::MatMul(a, b) => {
            let (a, b) = (value_of(*a), value_of(*b));
            if a.cols() != b.rows() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            a.matmul(b)
        }
        Op::Tanh(a) => value_of(*a).map(f64::tanh),
        Op::Sigmoid(a) => value_of(*a).map(sigmoid),
        Op::Softplus(a) => value_of(*a).map(softplus),
        Op::Relu(a) => value_of(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::PowI(a, n) => {
            let n = *n;
            value_of(*a).map(|x| x.powi(n))
        }
        Op::PowF(a, p) => {
            let p = *p;
            value_of(*a).map(|x| x.powf(p))
        }
        Op::Map(a, func) => value_of(*a).map(func.f),
        Op::Sum(a) => Matrix::scalar(value_of(*a).sum()),
        Op::Gather(a, idx) => {
            let a = value_of(*a);
            let cols = a.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx.iter() {
                if r >= a.rows() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "gather",
                        left: a.shape(),
                        right: (r, cols),
                    });
                }
                data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
            }
            Matrix::new(idx.len(), cols, data)
        }
        Op::VStack(parts) => {
            let cols = value_of(parts[0]).cols();
            let mut data = Vec::new();
            for &p in parts.iter() {
                let m = value_of(p);
                if m.cols() != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "vstack",
                        left: value_of(parts[0]).shape(),
                        right: m.shape(),
                    });
                }
                data.extend_from_slice(m.data());
            }
            let rows = data.len() / cols.max(1);
            Matrix::new(rows, cols, data)
        }
        Op::HStack(parts) => {
            let rows = value_of(parts[0]).rows();
            let mats: Vec<&Matrix> = parts.iter().map(|&p| value_of(p)).collect();
            for m in &mats {
                if m.rows() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "hstack",
                        left: mats[0].shape(),
                        right: m.shape(),
                    });
                }
            }
            let cols: usize = mats.iter().map(|m| m.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for m in &mats {
                    data.extend_from_slice(&m.data()[r * m.cols()..(r + 1) * m.cols()]);
                }
            }
            Matrix::new(rows, cols, data)
        }
        Op::Column(a, c) => {
            let a = value_of(*a);
            if *c >= a.cols() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "column",
                    left: a.shape(),
                    right: (a.rows(), *c),
                });
            }
            a.col(*c)
        }
    };
    Ok(out)
}

/// Adjoints produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when it was not retained.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    /// Number of nodes whose adjoint buffer is populated.
    pub fn populated(&self) -> usize {
        self.adjoints.iter().filter(|a| a.is_some()).count()
    }
}

/// Sum of all entries, used to fold a broadcast gradient back to a scalar.
fn reduce_to(shape: (usize, usize), g: &Matrix) -> Matrix {
    if g.shape() == shape {
        g.clone()
    } else {
        Matrix::scalar(g.sum())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], var: Var, contribution: Matrix) {
    match &mut adj[var.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes; usable as a truncation mark.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total count of `f64` values held by recorded nodes.
    pub fn values_held(&self) -> usize {
        self.held
    }

    /// Drops every node recorded at or after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        for node in self.nodes.drain(mark.min(self.nodes.len())..) {
            self.held -= node.value.len();
        }
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Matrix> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(var.0))
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(var.0))
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.held += value.len();
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            evaluate(&op, &|v: Var| &nodes[v.0].value)?
        };
        Ok(self.push(op, value))
    }

    fn record1(&mut self, a: Var, op: Op) -> Result<Var> {
        self.check(a)?;
        self.record(op)
    }

    fn record2(&mut self, a: Var, b: Var, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.record(op)
    }

    /// Records an input value. Gradients flow into leaves but not past them.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record2(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record2(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record2(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record2(a, b, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record1(a, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record1(a, Op::Offset(a, c))
    }

    /// `sum_k c_k * x_k` over equally shaped terms.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        for &(v, _) in terms {
            self.check(v)?;
        }
        self.record(Op::LinComb(terms.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record2(a, b, Op::MatMul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Relu(a))
    }

    /// Elementwise integer power.
    pub fn powi(&mut self, a: Var, n: i32) -> Result<Var> {
        self.record1(a, Op::PowI(a, n))
    }

    /// Elementwise real power; callers keep the base positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.record1(a, Op::PowF(a, p))
    }

    pub fn map(&mut self, a: Var, func: ElementFn) -> Result<Var> {
        self.record1(a, Op::Map(a, func))
    }

    /// Sum of all entries as a 1x1 value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record1(a, Op::Sum(a))
    }

    /// Row gather: output row `i` is row `idx[i]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        self.record1(a, Op::Gather(a, idx))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        for &p in parts {
            self.check(p)?;
        }
        self.record(Op::VStack(parts.into()))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        for &p in parts {
            self.check(p)?;
        }
        self.record(Op::HStack(parts.into()))
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        self.record1(a, Op::Column(a, c))
    }

    /// Recomputes every non-leaf value from the recorded operations.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, &|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Full reverse sweep from `output` seeded with `seed`. Every node up to
    /// `output` ends with a populated adjoint (zero if unreachable).
    pub fn backward(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        let mut grads = self.sweep(output, seed, false)?;
        for (i, slot) in grads.adjoints.iter_mut().enumerate().take(output.0 + 1) {
            if slot.is_none() {
                let (r, c) = self.nodes[i].value.shape();
                *slot = Some(Matrix::zeros(r, c));
            }
        }
        Ok(grads)
    }

    /// Reverse sweep for a scalar output with unit seed.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &[1.0])
    }

    /// Reverse sweep that frees intermediate adjoints as soon as they are
    /// propagated; only leaf adjoints survive. Used for long rollouts.
    pub fn backward_leaves(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        self.sweep(output, seed, true)
    }

    fn sweep(&self, output: Var, seed: &[f64], leaves_only: bool) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        self.check(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if seed.len() != out_shape.0 * out_shape.1 {
            return Err(AutodiffError::AdjointLength {
                expected: out_shape.0 * out_shape.1,
                got: seed.len(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::new(out_shape.0, out_shape.1, seed.to_vec()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = if leaves_only { adj[i].take() } else { adj[i].clone() };
            let Some(g) = g else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, reduce_to(val(*a).shape(), g));
                accumulate(adj, *b, reduce_to(val(*b).shape(), g));
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, reduce_to(val(*a).shape(), g));
                accumulate(adj, *b, reduce_to(val(*b).shape(), &g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip_broadcast(g, bv, g.shape(), |x, y| x * y);
                let gb = zip_broadcast(g, av, g.shape(), |x, y| x * y);
                accumulate(adj, *a, reduce_to(av.shape(), &ga));
                accumulate(adj, *b, reduce_to(bv.shape(), &gb));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip_broadcast(g, bv, g.shape(), |x, y| x / y);
                // d(a/b)/db = -out / b
                let q = zip_broadcast(out, bv, g.shape(), |o, y| -o / y);
                let gb = zip_broadcast(g, &q, g.shape(), |x, y| x * y);
                accumulate(adj, *a, reduce_to(av.shape(), &ga));
                accumulate(adj, *b, reduce_to(bv.shape(), &gb));
            }
            Op::Neg(a) => accumulate(adj, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(adj, *a, g.map(|x| c * x));
            }
            Op::Offset(a, _) => accumulate(adj, *a, g.clone()),
            Op::LinComb(terms) => {
                for &(v, c) in terms.iter() {
                    accumulate(adj, v, g.map(|x| c * x));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(adj, *a, g.matmul_t(bv));
                accumulate(adj, *b, av.t_matmul(g));
            }
            Op::Tanh(a) => {
                let d = zip_broadcast(g, out, g.shape(), |x, y| x * (1.0 - y * y));
                accumulate(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_broadcast(g, out, g.shape(), |x, y| x * y * (1.0 - y));
                accumulate(adj, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_broadcast(g, val(*a), g.shape(), |x, y| x * sigmoid(y));
                accumulate(adj, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_broadcast(g, val(*a), g.shape(), |x, y| if y > 0.0 { x } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::PowI(a, n) => {
                let n = *n;
                let d = zip_broadcast(g, val(*a), g.shape(), |x, y| {
                    if n == 0 {
                        0.0
                    } else {
                        x * f64::from(n) * y.powi(n - 1)
                    }
                });
                accumulate(adj, *a, d);
            }
            Op::PowF(a, p) => {
                let p = *p;
                let d = zip_broadcast(g, val(*a), g.shape(), |x, y| x * p * y.powf(p - 1.0));
                accumulate(adj, *a, d);
            }
            Op::Map(a, func) => {
                let df = func.df;
                let d = zip_broadcast(g, val(*a), g.shape(), |x, y| x * df(y));
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::Gather(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                {
                    let dd = d.data_mut();
                    for (i, &src) in idx.iter().enumerate() {
                        for k in 0..c {
                            dd[src * c + k] += g.data()[i * c + k];
                        }
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let (r, c) = val(p).shape();
                    let slice = g.data()[offset..offset + r * c].to_vec();
                    offset += r * c;
                    accumulate(adj, p, Matrix::new(r, c, slice));
                }
            }
            Op::HStack(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut col0 = 0;
                for &p in parts.iter() {
                    let c = val(p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + col0..r * total + col0 + c]);
                    }
                    col0 += c;
                    accumulate(adj, p, Matrix::new(rows, c, d));
                }
            }
            Op::Column(a, col) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.set(i, *col, g.data()[i]);
                }
                accumulate(adj, *a, d);
            }
        }
    }
}
