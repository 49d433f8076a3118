//! Reverse-mode differentiation over batched matrix values.
//!
//! Every node holds a dense `rows x cols` matrix. Rows are usually
//! independent simulation paths and columns are features, so one tape
//! records a whole mini-batch with length proportional to
//! `steps x layers` rather than to the parameter count.

use ndarray::{Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    ConcatCols(Vec<Var>),
    Columns { a: Var, start: usize },
    BroadcastCols { a: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of matrix operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward_sweep`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of the right shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shapes[v.0]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Matrix) {
    match slot {
        Some(g) => *g += &contribution,
        None => *slot = Some(contribution),
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_input(&mut self, v: f64) -> Var {
        self.input(Matrix::from_elem((1, 1), v))
    }

    pub fn column_input(&mut self, values: &[f64]) -> Var {
        self.input(column(values))
    }

    pub fn column_constant(&mut self, values: &[f64]) -> Var {
        self.constant(column(values))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Column values of an `rows x 1` node.
    pub fn column_values(&self, v: Var) -> Vec<f64> {
        self.value(v).column(0).to_vec()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        let g = self.grad(a) || self.grad(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let g = self.grad(a) || self.grad(b);
        self.push(Op::Sub(a, b), v, g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        let g = self.grad(a) || self.grad(b);
        self.push(Op::Mul(a, b), v, g)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a) / self.value(b);
        let g = self.grad(a) || self.grad(b);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let g = self.grad(a);
        self.push(Op::Scale(a, s), v, g)
    }

    /// Adds a scalar to every entry.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        let g = self.grad(a);
        self.push(Op::Shift(a), v, g)
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.grad(a) || self.grad(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    /// Matrix-vector product; `x` is a column node.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        assert_eq!(self.shape(x).1, 1, "matvec expects a column vector");
        self.matmul(m, x)
    }

    /// Affine layer `x · wᵀ + b` with `w` of shape `out x in` and `b` of shape `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut v = self.value(x).dot(&self.value(w).t());
        v += self.value(b);
        let g = self.grad(x) || self.grad(w) || self.grad(b);
        self.push(Op::Linear { x, w, b }, v, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let g = self.grad(a);
        self.push(Op::Exp(a), v, g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let g = self.grad(a);
        self.push(Op::Ln(a), v, g)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        let g = self.grad(a);
        self.push(Op::Powf(a, p), v, g)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.leaky_relu_with(a, LEAKY_SLOPE)
    }

    pub fn leaky_relu_with(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let g = self.grad(a);
        self.push(Op::LeakyRelu(a, slope), v, g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let g = self.grad(a);
        self.push(Op::Softplus(a), v, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let g = self.grad(a);
        self.push(Op::Sigmoid(a), v, g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let g = self.grad(a);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.fold(0.0, |s, &x| s + (x - m).exp()).ln();
            row.mapv_inplace(|x| x - lse);
        }
        let g = self.grad(a);
        self.push(Op::LogSoftmaxRows(a), v, g)
    }

    /// Sums each row into a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.grad(a);
        self.push(Op::RowSum(a), v, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        let g = self.grad(a);
        self.push(Op::Sum(a), v, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        let g = self.grad(a);
        self.push(Op::Mean(a), v, g)
    }

    /// Sum of the elementwise product, as a 1x1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "dot");
        let s = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, x, y| acc + x * y);
        let g = self.grad(a) || self.grad(b);
        self.push(Op::Dot(a, b), Matrix::from_elem((1, 1), s), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let g = parts.iter().any(|&p| self.grad(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    /// Column block `[start, start + len)`.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let g = self.grad(a);
        self.push(Op::Columns { a, start }, v, g)
    }

    /// Repeats a column node across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        assert_eq!(self.shape(a).1, 1, "broadcast_cols expects a column");
        let rows = self.shape(a).0;
        let src = self.value(a);
        let v = Matrix::from_shape_fn((rows, cols), |(i, _)| src[[i, 0]]);
        let g = self.grad(a);
        self.push(Op::BroadcastCols { a }, v, g)
    }

    /// Reverse sweep from a 1x1 root.
    pub fn backward_sweep(&self, root: Var) -> Adjoints {
        assert_eq!(self.shape(root), (1, 1), "root must be a scalar node");
        self.backward_with_seed(root, Matrix::from_elem((1, 1), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary adjoint for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Matrix) -> Adjoints {
        assert_eq!(self.shape(root), seed.dim(), "seed shape must match root");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Adjoints {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], -dy);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy * val(*b));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], dy * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy / bv);
                }
                if wants(*b) {
                    let mut g = dy * &node.value;
                    g /= bv;
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy * *s);
                }
            }
            Op::Shift(a) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy.dot(&val(*b).t()));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], val(*a).t().dot(dy));
                }
            }
            Op::Linear { x, w, b } => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], dy.dot(val(*w)));
                }
                if wants(*w) {
                    accumulate(&mut grads[w.0], dy.t().dot(val(*x)));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy * &node.value);
                }
            }
            Op::Ln(a) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy / val(*a));
                }
            }
            Op::Powf(a, p) => {
                if wants(*a) {
                    let mut g = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    g *= dy;
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if wants(*a) {
                    let mut g = dy.clone();
                    Zip::from(&mut g)
                        .and(val(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g *= slope
                            }
                        });
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Softplus(a) => {
                if wants(*a) {
                    let mut g = val(*a).mapv(sigmoid);
                    g *= dy;
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let mut g = node.value.mapv(|s| s * (1.0 - s));
                    g *= dy;
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.dim());
                    for ((mut grow, yrow), dyrow) in
                        g.rows_mut().into_iter().zip(y.rows()).zip(dy.rows())
                    {
                        let inner: f64 = yrow.iter().zip(dyrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .and(&dyrow)
                            .for_each(|g, &yi, &di| *g = yi * (di - inner));
                    }
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.dim());
                    for ((mut grow, yrow), dyrow) in
                        g.rows_mut().into_iter().zip(y.rows()).zip(dy.rows())
                    {
                        let total: f64 = dyrow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .and(&dyrow)
                            .for_each(|g, &yi, &di| *g = di - yi.exp() * total);
                    }
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::RowSum(a) => {
                if wants(*a) {
                    let cols = val(*a).ncols();
                    let g = Matrix::from_shape_fn((dy.nrows(), cols), |(i, _)| dy[[i, 0]]);
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], Matrix::from_elem(val(*a).dim(), dy[[0, 0]]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let count = val(*a).len() as f64;
                    accumulate(
                        &mut grads[a.0],
                        Matrix::from_elem(val(*a).dim(), dy[[0, 0]] / count),
                    );
                }
            }
            Op::Dot(a, b) => {
                let s = dy[[0, 0]];
                if wants(*a) {
                    accumulate(&mut grads[a.0], val(*b) * s);
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], val(*a) * s);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if wants(*p) {
                        let g = dy.slice(ndarray::s![.., start..start + w]).to_owned();
                        accumulate(&mut grads[p.0], g);
                    }
                    start += w;
                }
            }
            Op::Columns { a, start } => {
                if wants(*a) {
                    let mut g = Matrix::zeros(val(*a).dim());
                    let w = dy.ncols();
                    g.slice_mut(ndarray::s![.., *start..*start + w]).assign(dy);
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::BroadcastCols { a } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], dy.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
        }
    }
}

/// Free-function form of [`Tape::backward_sweep`].
pub fn backward_sweep(tape: &Tape, root: Var) -> Adjoints {
    tape.backward_sweep(root)
}

/// Builds an `n x 1` matrix.
pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Builds a `1 x n` matrix.
pub fn row(values: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}
