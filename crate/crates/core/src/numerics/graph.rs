//! Append-only computation graph with reverse-mode gradients.
//!
//! Nodes are recorded in creation order, so a node's inputs always have
//! smaller ids and a single reverse sweep visits them in topological order.

use super::tensor::Tensor;
use super::MIN_ROW_NORM;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One term `coeff * input[row, col]` of a [`Graph::sparse_sum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub row: usize,
    pub col: usize,
    pub coeff: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    Sum(Var),
    OffDiagonalLogSumExp(Var),
    SparseSum { input: Var, terms: Vec<Term> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf { param } => *param,
            Op::MatMul(a, b) | Op::AddRowBias(a, b) | Op::Add(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Transpose(a) | Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) => {
                self.nodes[a.0].requires_grad
            }
            Op::OffDiagonalLogSumExp(a) => self.nodes[a.0].requires_grad,
            Op::L2NormalizeRows { input, .. } | Op::SparseSum { input, .. } => {
                self.nodes[input.0].requires_grad
            }
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: true }, value)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: false }, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { param: true })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    /// `a[i, j] + bias[0, j]` for a `1 x n` bias.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.shape() != [1, av.cols()] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + bv.data()[idx % n])
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(Op::AddRowBias(a, bias), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add_scaled(self.value(b), 1.0)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), out)
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "l2_normalize_rows",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut norms = Vec::with_capacity(m);
        let mut data = av.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < MIN_ROW_NORM {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has norm {norm:e}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(Op::L2NormalizeRows { input: a, norms }, out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Per-row `log sum_{j != i} exp(a[i, j])` of a square matrix, as an `m x 1` column.
    pub fn off_diagonal_logsumexp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let m = av.rows();
        if av.shape() != [m, m] || m < 2 {
            return Err(Error::Dimension {
                op: "off_diagonal_logsumexp",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = av.row(i);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| (v - max).exp())
                    .sum();
                max + s.ln()
            })
            .collect();
        let out = Tensor::from_parts(vec![m, 1], out);
        Ok(self.push(Op::OffDiagonalLogSumExp(a), out))
    }

    /// Scalar `offset + sum_t coeff_t * a[row_t, col_t]`.
    pub fn sparse_sum(&mut self, a: Var, terms: Vec<Term>, offset: f64) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut total = offset;
        for t in &terms {
            if t.row >= m || t.col >= n {
                return Err(Error::invalid(format!(
                    "sparse_sum: index ({}, {}) outside {:?}",
                    t.row,
                    t.col,
                    av.shape()
                )));
            }
            total += t.coeff * av.get(t.row, t.col);
        }
        Ok(self.push(Op::SparseSum { input: a, terms }, Tensor::scalar(total)))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradient accumulators so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar `root`. Every parameter leaf ends up with a
    /// gradient of its own shape (zeros when it does not influence `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let shape = rv.shape().to_vec();
        self.backward_done = true;
        self.grads[root.0] = Some(Tensor::ones(&shape));

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let bt = self.value(b).transpose()?;
                        let ga = g.matmul(&bt)?;
                        self.accumulate(a, ga);
                    }
                    if self.needs(b) {
                        let at = self.value(a).transpose()?;
                        let gb = at.matmul(&g)?;
                        self.accumulate(b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = g.transpose()?;
                    self.accumulate(a, ga);
                }
                Op::AddRowBias(a, bias) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for (idx, v) in g.data().iter().enumerate() {
                        gb[idx % n] += v;
                    }
                    self.accumulate(bias, Tensor::from_parts(vec![1, n], gb));
                    self.accumulate(a, g.clone());
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::Scale(a, f) => self.accumulate(a, g.scale(f)),
                Op::Relu(a) => {
                    let input = self.value(a);
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let ga = Tensor::from_parts(g.shape().to_vec(), data);
                    self.accumulate(a, ga);
                }
                Op::L2NormalizeRows { input, norms } => {
                    // dx = (g - y (y . g)) / |x|
                    let y = &self.nodes[id].value;
                    let n = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            data[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    let ga = Tensor::from_parts(y.shape().to_vec(), data);
                    self.accumulate(input, ga);
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::filled(&shape, g.item()));
                }
                Op::OffDiagonalLogSumExp(a) => {
                    let av = self.value(a);
                    let lse = &self.nodes[id].value;
                    let m = av.rows();
                    let mut data = vec![0.0; m * m];
                    for i in 0..m {
                        let gi = g.data()[i];
                        let li = lse.data()[i];
                        for j in 0..m {
                            if j != i {
                                data[i * m + j] = gi * (av.get(i, j) - li).exp();
                            }
                        }
                    }
                    self.accumulate(a, Tensor::from_parts(vec![m, m], data));
                }
                Op::SparseSum { input, terms } => {
                    let av = self.value(input);
                    let n = av.cols();
                    let mut data = vec![0.0; av.len()];
                    let gv = g.item();
                    for t in &terms {
                        data[t.row * n + t.col] += gv * t.coeff;
                    }
                    let ga = Tensor::from_parts(av.shape().to_vec(), data);
                    self.accumulate(input, ga);
                }
            }
            // Parameter leaves keep their gradient; interior slots are consumed.
            if matches!(self.nodes[id].op, Op::Leaf { param: true }) {
                self.grads[id] = Some(g);
            }
        }

        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf { param: true }) && self.grads[id].is_none() {
                let shape = self.nodes[id].value.shape().to_vec();
                self.grads[id] = Some(Tensor::zeros(&shape));
            }
        }
        Ok(())
    }
}
