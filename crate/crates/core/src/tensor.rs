//! Dense tensors, a define-by-run reverse-mode graph over row-major
//! matrices, and the Adam optimizer.
//!
//! Every graph value is treated as a matrix: a 1-D tensor of length `n` is a
//! `1 × n` row. Leaves can be marked differentiable, which is how both
//! network parameters and imputed covariate entries receive gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!("unsupported rank {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Glorot-uniform matrix `rows × cols` (rows = fan-out, cols = fan-in).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

// ---------------------------------------------------------------------------
// Kernels (row-major, accumulate into `out`)
// ---------------------------------------------------------------------------

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(brow) {
                *oj += aip * bj;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in a[p * m..(p + 1) * m].iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(brow) {
                *oj += api * bj;
            }
        }
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · wᵀ + b`
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Nodes are appended in evaluation order, so insertion order is a valid
/// topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that depends on a
/// differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Differentiable leaf (a parameter or an imputed input).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xr, xc) = dims(self.value(x));
        let (wr, wc) = dims(self.value(w));
        let bl = self.value(b).len();
        if xc != wc || bl != wr {
            return Err(Error::Shape(format!(
                "dense: input {xr}x{xc}, weight {wr}x{wc}, bias {bl}"
            )));
        }
        let mut out = vec![0.0; xr * wr];
        {
            let bias = self.value(b).data();
            for row in out.chunks_mut(wr) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            xr,
            xc,
            wr,
            &mut out,
        );
        let shape = if self.value(x).shape().len() == 1 {
            vec![wr]
        } else {
            vec![xr, wr]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Dense { x, w, b }, Tensor { shape, data: out }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul(a, b),
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor { shape, data }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor { shape, data }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(a);
        self.push(op, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Row-wise softmax; every row needs at least two entries.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if cols < 2 {
            return Err(Error::Shape("softmax needs at least 2 classes".into()));
        }
        let mut data = t.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor {
                shape: vec![rows, total],
                data,
            },
            rg,
        ))
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = dims(t);
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::Shape("gather_rows: index out of range".into()));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor {
            shape: vec![index.len(), cols],
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, index), out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// `scale · Σ_r w_r · (−ln max(p[r, y_r], PROB_FLOOR))`
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    ) -> Result<Var> {
        let t = self.value(probs);
        let (rows, cols) = dims(t);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape("cross_entropy: target/weight count".into()));
        }
        if targets.iter().any(|&y| y >= cols) {
            return Err(Error::Shape("cross_entropy: target out of range".into()));
        }
        let mut s = 0.0;
        for r in 0..rows {
            s += weights[r] * -t.get(r, targets[r]).max(PROB_FLOOR).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                targets,
                weights,
                scale,
            },
            Tensor::scalar(scale * s),
            rg,
        ))
    }

    /// `scale · Σ_r w_r · −[y ln ξ + (1−y) ln(1−ξ)]` on a single-column input.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    ) -> Result<Var> {
        let t = self.value(probs);
        if t.cols() != 1 || targets.len() != t.rows() || weights.len() != t.rows() {
            return Err(Error::Shape("binary_cross_entropy: shapes".into()));
        }
        let mut s = 0.0;
        for (r, (&y, &w)) in targets.iter().zip(&weights).enumerate() {
            let p = t.data[r];
            let l = if y == 1 {
                -p.max(PROB_FLOOR).ln()
            } else {
                -(1.0 - p).max(PROB_FLOOR).ln()
            };
            s += w * l;
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Op::BinaryCrossEntropy {
                probs,
                targets,
                weights,
                scale,
            },
            Tensor::scalar(scale * s),
            rg,
        ))
    }

    /// Reverse accumulation from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a node that was never evaluated".into(),
            ));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let (xr, xc) = dims(self.value(*x));
                    let wr = self.value(*w).rows();
                    if self.rg(*x) {
                        let dx = self.acc(&mut grads, *x);
                        gemm_nn(&g, self.value(*w).data(), xr, wr, xc, dx);
                    }
                    if self.rg(*w) {
                        let dw = self.acc(&mut grads, *w);
                        gemm_tn(&g, self.value(*x).data(), xr, wr, xc, dw);
                    }
                    if self.rg(*b) {
                        let db = self.acc(&mut grads, *b);
                        for row in g.chunks(wr) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(self.value(*a));
                    let nn = self.value(*b).cols();
                    if self.rg(*a) {
                        let da = self.acc(&mut grads, *a);
                        gemm_nt(&g, self.value(*b).data(), m, nn, k, da);
                    }
                    if self.rg(*b) {
                        let db = self.acc(&mut grads, *b);
                        gemm_tn(self.value(*a).data(), &g, m, k, nn, db);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            for (d, x) in self.acc(&mut grads, v).iter_mut().zip(&g) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let other = &self.nodes[b.0].value.data;
                        for ((d, x), o) in self.acc(&mut grads, *a).iter_mut().zip(&g).zip(other) {
                            *d += x * o;
                        }
                    }
                    if self.rg(*b) {
                        let other = &self.nodes[a.0].value.data;
                        for ((d, x), o) in self.acc(&mut grads, *b).iter_mut().zip(&g).zip(other) {
                            *d += x * o;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.rg(*a) {
                        for (d, x) in self.acc(&mut grads, *a).iter_mut().zip(&g) {
                            *d += x * s;
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.rg(*a) {
                        let input = &self.nodes[a.0].value.data;
                        let d = Self::acc_raw(&mut grads, a.0, input.len());
                        for ((d, x), &u) in d.iter_mut().zip(&g).zip(input) {
                            if u > 0.0 {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    if self.rg(*a) {
                        let out = &node.value.data;
                        let d = Self::acc_raw(&mut grads, a.0, out.len());
                        for ((d, x), &y) in d.iter_mut().zip(&g).zip(out) {
                            *d += x * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if self.rg(*a) {
                        let out = &node.value.data;
                        let d = Self::acc_raw(&mut grads, a.0, out.len());
                        for ((d, x), &y) in d.iter_mut().zip(&g).zip(out) {
                            *d += x * y * (1.0 - y);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.rg(*a) {
                        let out = &node.value;
                        let cols = out.cols();
                        let d = Self::acc_raw(&mut grads, a.0, out.len());
                        for ((drow, grow), prow) in d
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(out.data.chunks(cols))
                        {
                            let dot: f64 = grow.iter().zip(prow).map(|(x, p)| x * p).sum();
                            for ((dd, x), p) in drow.iter_mut().zip(grow).zip(prow) {
                                *dd += p * (x - dot);
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let d = self.acc(&mut grads, p);
                            for (r, drow) in d.chunks_mut(w).enumerate() {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (dd, s) in drow.iter_mut().zip(src) {
                                    *dd += s;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(a, index) => {
                    if self.rg(*a) {
                        let cols = self.value(*a).cols();
                        let d = self.acc(&mut grads, *a);
                        for (k, &i) in index.iter().enumerate() {
                            let src = &g[k * cols..(k + 1) * cols];
                            for (dd, s) in d[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                                *dd += s;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.rg(*a) {
                        for d in self.acc(&mut grads, *a).iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::CrossEntropy {
                    probs,
                    targets,
                    weights,
                    scale,
                } => {
                    if self.rg(*probs) {
                        let p = &self.nodes[probs.0].value;
                        let cols = p.cols();
                        let d = Self::acc_raw(&mut grads, probs.0, p.len());
                        for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                            let pv = p.data[r * cols + y];
                            if pv > PROB_FLOOR {
                                d[r * cols + y] -= g[0] * scale * w / pv;
                            }
                        }
                    }
                }
                Op::BinaryCrossEntropy {
                    probs,
                    targets,
                    weights,
                    scale,
                } => {
                    if self.rg(*probs) {
                        let p = &self.nodes[probs.0].value;
                        let d = Self::acc_raw(&mut grads, probs.0, p.len());
                        for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                            let pv = p.data[r];
                            if y == 1 {
                                if pv > PROB_FLOOR {
                                    d[r] -= g[0] * scale * w / pv;
                                }
                            } else if 1.0 - pv > PROB_FLOOR {
                                d[r] += g[0] * scale * w / (1.0 - pv);
                            }
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        Self::acc_raw(grads, v.0, self.nodes[v.0].value.len())
    }

    fn acc_raw(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("adam: parameter count mismatch".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape("adam: parameter shape mismatch".into()));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for (i, (pv, &gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
