//! Reverse-mode differentiation over an append-only tape of tensor primitives.
//!
//! Nodes are pushed in evaluation order, so parents always precede children
//! and the backward sweep is a single reverse pass. Binary elementwise ops
//! broadcast the smaller operand when it is a scalar, a row vector matching the
//! trailing extent, or a reshaped copy of equal length.
//!
//! Shape mismatches inside the tape are programmer errors and panic; callers
//! validate user-facing shapes before building a graph.

use super::special::{digamma_unchecked, ln_gamma_unchecked, sigmoid, softplus};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Lgamma(Var),
    /// ½cos(z) + ½sin(z); the derivative is cached in `aux`.
    Feature(Var),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    /// Row-wise log-softmax picked at one label per row; softmax cached in `aux`.
    LogSoftmaxPick(Var, Vec<usize>),
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
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Lgamma(_) => "lgamma",
            Op::Feature(_) => "feature",
            Op::MatMul(..) => "matmul",
            Op::MatMulBT(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::LogSoftmaxPick(..) => "log_softmax_pick",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    aux: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.adj[v.0] {
            Some(a) => Tensor::new(self.shapes[v.0].clone(), a.clone()).expect("adjoint shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f64]> {
        self.adj[v.0].as_deref()
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &str) -> Vec<usize> {
    let (na, nb) = (a.numel(), b.numel());
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let ns = small.numel();
    let ok = ns == big.numel() || ns == 1 || ns == big.cols();
    assert!(
        ok,
        "{op}: cannot broadcast {:?} with {:?}",
        a.shape(),
        b.shape()
    );
    big.shape().to_vec()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Vec<f64>>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node: a parameter or a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(ta, tb, op.name());
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (na, nb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let value = Tensor::new(shape, data).expect("broadcast shape");
        self.push(op, value, None)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(op, value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::PowScalar(a, p))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn lgamma(&mut self, a: Var) -> Var {
        self.unary(a, ln_gamma_unchecked, Op::Lgamma(a))
    }

    /// ½cos(z) + ½sin(z), elementwise.
    pub fn feature(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let mut deriv = Vec::with_capacity(src.numel());
        let value = src.map(|z| {
            let (s, c) = z.sin_cos();
            0.5 * (c + s)
        });
        for &z in src.data() {
            let (s, c) = z.sin_cos();
            deriv.push(0.5 * (c - s));
        }
        self.push(Op::Feature(a), value, Some(deriv))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .matmul(&self.nodes[b.0].value)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatMul(a, b), value, None)
    }

    /// a (m x k) · bᵀ where b is (n x k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul_bt: {:?} x {:?}ᵀ", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out).expect("matmul_bt shape");
        self.push(Op::MatMulBT(a, b), value, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose().unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::Transpose(a), value, None)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::Reshape(a), value, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::Sum(a), Tensor::scalar(s), None)
    }

    /// Column means of a matrix, as a 1 x cols matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::matrix(1, c, out).expect("mean_rows shape");
        self.push(Op::MeanRows(a), value, None)
    }

    /// For logits (B x C) returns the B values log softmax(row_i)[labels_i].
    pub fn log_softmax_pick(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = &self.nodes[logits.0].value;
        let (b, c) = (t.rows(), t.cols());
        assert_eq!(labels.len(), b, "log_softmax_pick: {} labels for {b} rows", labels.len());
        let mut probs = vec![0.0; b * c];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            assert!(labels[i] < c, "label {} out of range for {c} classes", labels[i]);
            out.push(row[labels[i]] - lse);
        }
        self.push(
            Op::LogSoftmaxPick(logits, labels.to_vec()),
            Tensor::vector(out),
            Some(probs),
        )
    }

    /// Index and op name of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        if let Some((i, name)) = self.nodes[..=loss.0]
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
        {
            return Err(Error::Numerical(format!(
                "non-finite value at node {i} ({name}) before backward pass"
            )));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite adjoint at node {i} ({})",
                    self.nodes[i].op.name()
                )));
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(Gradients {
            adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        // Accumulate an elementwise contribution, reducing over broadcast copies.
        let mut bcast = |v: Var, f: &dyn Fn(usize) -> f64| {
            let n = self.nodes[v.0].value.numel();
            let dst = acc(adj, v, n);
            for (k, gk) in g.iter().enumerate() {
                dst[k % n] += gk * f(k);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bcast(*a, &|_| 1.0);
                bcast(*b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                bcast(*a, &|_| 1.0);
                bcast(*b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                bcast(*a, &|k| db[k % db.len()]);
                bcast(*b, &|k| da[k % da.len()]);
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                bcast(*a, &|k| 1.0 / db[k % db.len()]);
                bcast(*b, &|k| {
                    let y = db[k % db.len()];
                    -da[k % da.len()] / (y * y)
                });
            }
            Op::Neg(a) => bcast(*a, &|_| -1.0),
            Op::AddScalar(a) => bcast(*a, &|_| 1.0),
            Op::MulScalar(a, c) => bcast(*a, &|_| *c),
            Op::PowScalar(a, p) => {
                let x = val(*a);
                bcast(*a, &|k| p * x[k].powf(p - 1.0));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                bcast(*a, &|k| y[k]);
            }
            Op::Log(a) => {
                let x = val(*a);
                bcast(*a, &|k| 1.0 / x[k]);
            }
            Op::Sin(a) => {
                let x = val(*a);
                bcast(*a, &|k| x[k].cos());
            }
            Op::Cos(a) => {
                let x = val(*a);
                bcast(*a, &|k| -x[k].sin());
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                bcast(*a, &|k| 0.5 / y[k]);
            }
            Op::Square(a) => {
                let x = val(*a);
                bcast(*a, &|k| 2.0 * x[k]);
            }
            Op::Softplus(a) => {
                let x = val(*a);
                bcast(*a, &|k| sigmoid(x[k]));
            }
            Op::Lgamma(a) => {
                let x = val(*a);
                bcast(*a, &|k| digamma_unchecked(x[k]));
            }
            Op::Feature(a) => {
                let d = node.aux.as_ref().expect("feature derivative cache");
                bcast(*a, &|k| d[k]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G · Bᵀ, dB = Aᵀ · G
                matmul_bt_into(g, tb.data(), acc(adj, *a, m * k), m, n, k);
                matmul_at_into(ta.data(), g, acc(adj, *b, k * n), m, k, n);
            }
            Op::MatMulBT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A Bᵀ: dA = G · B, dB = Gᵀ · A
                matmul_into(g, tb.data(), acc(adj, *a, m * k), m, n, k);
                matmul_at_into(g, ta.data(), acc(adj, *b, n * k), m, n, k);
            }
            Op::Transpose(a) => {
                let t = &self.nodes[a.0].value;
                let (r, c) = (t.rows(), t.cols());
                let dst = acc(adj, *a, r * c);
                for p in 0..r {
                    for q in 0..c {
                        dst[p * c + q] += g[q * r + p];
                    }
                }
            }
            Op::Reshape(a) => bcast(*a, &|_| 1.0),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                let dst = acc(adj, *a, n);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanRows(a) => {
                let t = &self.nodes[a.0].value;
                let (r, c) = (t.rows(), t.cols());
                let inv = 1.0 / r as f64;
                let dst = acc(adj, *a, r * c);
                for p in 0..r {
                    for q in 0..c {
                        dst[p * c + q] += g[q] * inv;
                    }
                }
            }
            Op::LogSoftmaxPick(a, labels) => {
                let probs = node.aux.as_ref().expect("softmax cache");
                let t = &self.nodes[a.0].value;
                let (b, c) = (t.rows(), t.cols());
                let dst = acc(adj, *a, b * c);
                for p in 0..b {
                    for q in 0..c {
                        let onehot = if q == labels[p] { 1.0 } else { 0.0 };
                        dst[p * c + q] += g[p] * (onehot - probs[p * c + q]);
                    }
                }
            }
        }
    }
}
