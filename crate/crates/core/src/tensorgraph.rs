//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of operation records. Node ids are
//! handed out in insertion order, so every input precedes its consumer and the
//! backward pass is a single sweep in exact reverse insertion order. Values are
//! dense row-major `f64` tensors.
//!
//! Broadcasting is limited to a one-element operand combined with a tensor.
//! Row or column broadcasts are expressed as a product with a ones vector.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// An `n × 1` column vector.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Minimum,
    Maximum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    Exp,
    Log,
    Square,
    Sigmoid,
    Neg,
    /// `max(x, lo)`: gradient passes where `x >= lo`.
    ClampMin(f64),
    /// `min(x, hi)`: gradient passes where `x <= hi`.
    ClampMax(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v`'s value with no path back into the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let out = Tensor {
            shape: vec![m, n],
            data: matmul_nn(&av.data, &bv.data, m, k, n),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Minimum => x.min(y),
            BinaryKind::Maximum => x.max(y),
        };
        let out = if av.shape == bv.shape {
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if bv.is_scalar() {
            let y = bv.data[0];
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if av.is_scalar() {
            let x = av.data[0];
            Tensor {
                shape: bv.shape.clone(),
                data: bv.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Binary(kind, a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Minimum, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Maximum, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if kind == UnaryKind::Log {
            if let Some((index, &value)) = xv.data.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value,
                });
            }
        }
        let f = |v: f64| match kind {
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Neg => -v,
            UnaryKind::ClampMin(lo) => v.max(lo),
            UnaryKind::ClampMax(hi) => v.min(hi),
            UnaryKind::Scale(c) => c * v,
            UnaryKind::AddScalar(c) => v + c,
        };
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Unary(kind, x), out, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x).expect("tanh is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x).expect("square is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x).expect("neg is total")
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(UnaryKind::ClampMin(lo), x).expect("clamp is total")
    }

    pub fn clamp_max(&mut self, x: Var, hi: f64) -> Var {
        self.unary(UnaryKind::ClampMax(hi), x).expect("clamp is total")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let upper = self.clamp_max(x, hi);
        self.clamp_min(upper, lo)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x).expect("scale is total")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x).expect("shift is total")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.requires_grad(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.requires_grad(x);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    /// Broadcast a `1 × n` row to `rows × n`.
    pub fn repeat_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(Tensor::ones(vec![rows, 1]));
        self.matmul(ones, row)
    }

    /// Sum each row of an `m × n` matrix into an `m × 1` column.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.nodes[x.0].value.dims2("row_sums")?;
        let ones = self.constant(Tensor::ones(vec![n, 1]));
        self.matmul(x, ones)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape.clone()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                    let n = self.nodes[b.0].value.shape[1];
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_nt(&upstream, &self.nodes[b.0].value.data, m, n, k);
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn(&self.nodes[a.0].value.data, &upstream, m, k, n);
                        self.accumulate(b, &gb);
                    }
                }
                Op::Binary(kind, a, b) => self.backward_binary(kind, a, b, i, &upstream),
                Op::Unary(kind, x) => {
                    if self.nodes[x.0].requires_grad {
                        let g = self.backward_unary(kind, x, i, &upstream);
                        self.accumulate(x, &g);
                    }
                }
                Op::Sum(x) => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.nodes[x.0].value.len();
                        self.accumulate(x, &vec![upstream[0]; n]);
                    }
                }
                Op::Mean(x) => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.nodes[x.0].value.len();
                        self.accumulate(x, &vec![upstream[0] / n as f64; n]);
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_binary(&mut self, kind: BinaryKind, a: Var, b: Var, out: usize, upstream: &[f64]) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = self.nodes[out].value.len();
        let a_at = |j: usize| if av.len() == n { av.data[j] } else { av.data[0] };
        let b_at = |j: usize| if bv.len() == n { bv.data[j] } else { bv.data[0] };
        // local partials (d out/d a, d out/d b) at element j
        let partials = |j: usize| -> (f64, f64) {
            let (x, y) = (a_at(j), b_at(j));
            match kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                // ties route to the left operand
                BinaryKind::Minimum => if x <= y { (1.0, 0.0) } else { (0.0, 1.0) },
                BinaryKind::Maximum => if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
            }
        };
        let (a_full, b_full) = (av.len() == n, bv.len() == n);
        let mut ga = vec![0.0; if a_full { n } else { 1 }];
        let mut gb = vec![0.0; if b_full { n } else { 1 }];
        for (j, &u) in upstream.iter().enumerate() {
            let (da, db) = partials(j);
            ga[if a_full { j } else { 0 }] += u * da;
            gb[if b_full { j } else { 0 }] += u * db;
        }
        if self.nodes[a.0].requires_grad {
            self.accumulate(a, &ga);
        }
        if self.nodes[b.0].requires_grad {
            self.accumulate(b, &gb);
        }
    }

    fn backward_unary(&self, kind: UnaryKind, x: Var, out: usize, upstream: &[f64]) -> Vec<f64> {
        let xs = &self.nodes[x.0].value.data;
        let ys = &self.nodes[out].value.data;
        upstream
            .iter()
            .zip(xs.iter().zip(ys))
            .map(|(&u, (&x, &y))| {
                u * match kind {
                    UnaryKind::Tanh => 1.0 - y * y,
                    UnaryKind::Exp => y,
                    UnaryKind::Log => 1.0 / x,
                    UnaryKind::Square => 2.0 * x,
                    UnaryKind::Sigmoid => y * (1.0 - y),
                    UnaryKind::Neg => -1.0,
                    UnaryKind::ClampMin(lo) => f64::from(x >= lo),
                    UnaryKind::ClampMax(hi) => f64::from(x <= hi),
                    UnaryKind::Scale(c) => c,
                    UnaryKind::AddScalar(_) => 1.0,
                }
            })
            .collect()
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Gradient of the last backward root with respect to `v`. Leaves that
    /// received no gradient report zeros.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `A[m×k] = G[m×n] · Bᵀ` for `B[k×n]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `B[k×n] = Aᵀ · G` for `A[m×k]`, `G[m×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gj) in orow.iter_mut().zip(grow) {
                *o += aip * gj;
            }
        }
    }
    out
}
