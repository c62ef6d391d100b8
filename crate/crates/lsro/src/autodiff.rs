//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Values live in a [`Graph`] arena; every operation appends a node holding
//! its forward value, so node indices are already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Gradients accumulate across backward calls until [`Graph::zero_grads`];
//! training loops rely on this when a batch mixes loss terms.
//!
//! All arithmetic is `f64`. Probabilities are routed through a guarded
//! logarithm (`ln(max(x, 1e-12))`) so an underflowed softmax output yields a
//! large finite loss instead of `-inf`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied inside the guarded logarithm.
pub const MIN_PROB: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// The differentiable operations the engine supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Scale,
    Relu,
    Tanh,
    Log,
    SoftmaxRows,
    Sum,
    Mean,
    ElementwiseMul,
    Dropout,
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Tanh(TensorId),
    Log(TensorId),
    SoftmaxRows(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    ElementwiseMul(TensorId, TensorId),
    /// Mask entries are 0 (dropped) or 1/(1-rate) (kept), fixed at forward time.
    Dropout(TensorId, Vec<f64>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Row-major dense matrix used for plain (non-differentiated) values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A computation graph confined to one logical thread.
pub struct Graph {
    nodes: Vec<Node>,
    grads_populated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads_populated: false,
        }
    }

    /// Number of nodes currently on the tape; pair with [`Graph::truncate`]
    /// to roll per-batch nodes off while keeping parameters.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node at index `mark` or later. Callers must not retain
    /// handles to truncated nodes.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf node (input or parameter).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data))
    }

    /// Leaf holding a scalar.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    /// Leaf holding a matrix.
    pub fn matrix(&mut self, m: &Matrix) -> TensorId {
        self.push(Op::Leaf, vec![m.rows, m.cols], m.data.clone())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Overwrite a leaf's data in place (optimizer updates).
    pub fn data_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.nodes[id.0].data
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    /// Reset every gradient on the tape to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = false;
    }

    fn shapes_equal(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ---- operations ----

    /// Generic dispatcher over [`OpKind`]. `scalar` feeds `Scale` (factor) and
    /// `Dropout` (rate); `rng` is required by `Dropout`, which always runs in
    /// train mode here (eval-mode dropout is the identity and adds no node).
    pub fn apply(
        &mut self,
        op: OpKind,
        inputs: &[TensorId],
        scalar: Option<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let unary = |ins: &[TensorId]| -> Result<TensorId> {
            match ins {
                [x] => Ok(*x),
                _ => Err(Error::invalid(format!(
                    "{op:?} expects 1 input, got {}",
                    ins.len()
                ))),
            }
        };
        let binary = |ins: &[TensorId]| -> Result<(TensorId, TensorId)> {
            match ins {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::invalid(format!(
                    "{op:?} expects 2 inputs, got {}",
                    ins.len()
                ))),
            }
        };
        match op {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Sub => {
                let (a, b) = binary(inputs)?;
                self.sub(a, b)
            }
            OpKind::ElementwiseMul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::Scale => {
                let x = unary(inputs)?;
                let c = scalar.ok_or_else(|| Error::invalid("Scale requires a scalar factor"))?;
                self.scale(x, c)
            }
            OpKind::Relu => unary(inputs).and_then(|x| self.relu(x)),
            OpKind::Tanh => unary(inputs).and_then(|x| self.tanh(x)),
            OpKind::Log => unary(inputs).and_then(|x| self.log(x)),
            OpKind::SoftmaxRows => unary(inputs).and_then(|x| self.softmax_rows(x)),
            OpKind::Sum => unary(inputs).and_then(|x| self.sum(x)),
            OpKind::Mean => unary(inputs).and_then(|x| self.mean(x)),
            OpKind::Dropout => {
                let x = unary(inputs)?;
                let rate =
                    scalar.ok_or_else(|| Error::invalid("Dropout requires a rate scalar"))?;
                let rng = rng.ok_or_else(|| Error::invalid("Dropout requires a generator"))?;
                self.dropout(x, rate, true, rng)
            }
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.shapes_equal("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, data))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.shapes_equal("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub(a, b), shape, data))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.shapes_equal("elementwise_mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::ElementwiseMul(a, b), shape, data))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Scale(x, c), shape, data))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Relu(x), shape, data))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Tanh(x), shape, data))
    }

    /// Guarded logarithm: `ln(max(x, 1e-12))`. Negative entries are an
    /// error; an underflowed probability of exactly zero is clamped to the
    /// floor so a confident wrong prediction stays finite.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some((index, &value)) = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| **v < 0.0)
        {
            return Err(Error::NonPositiveLog { value, index });
        }
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|v| v.max(MIN_PROB).ln())
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Log(x), shape, data))
    }

    /// Numerically stable softmax along each row (a 1-D tensor is one row).
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = match shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Op::SoftmaxRows(x), shape, data))
    }

    /// Sum of all entries; returns shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        Ok(self.push(Op::Sum(x), vec![1], vec![total]))
    }

    /// Mean of all entries; returns shape `[1]`.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].data.len() as f64;
        let total: f64 = self.nodes[x.0].data.iter().sum();
        Ok(self.push(Op::Mean(x), vec![1], vec![total / n]))
    }

    /// Inverted dropout. In train mode each entry is zeroed independently
    /// with probability `rate` and survivors are scaled by `1/(1-rate)`;
    /// in eval mode the input is returned unchanged.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Dropout(x, mask), shape, data))
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated (`+=`)
    /// into every node reachable from `loss`; call [`Graph::zero_grads`]
    /// between steps.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = G @ B^T, dB = A^T @ G
                    let da = matmul_raw_bt(&g, &self.nodes[b.0].data, m, n, k);
                    let db = matmul_raw_at(&self.nodes[a.0].data, &g, m, k, n);
                    accumulate(&mut local[a.0], &da);
                    accumulate(&mut local[b.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut local[a.0], &g);
                    accumulate(&mut local[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut local[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut local[b.0], &neg);
                }
                Op::ElementwiseMul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut local[a.0], &da);
                    accumulate(&mut local[b.0], &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut local[a.0], &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut local[a.0], &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut local[a.0], &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, xv)| gv / xv.max(MIN_PROB))
                        .collect();
                    accumulate(&mut local[a.0], &da);
                }
                Op::SoftmaxRows(a) => {
                    let shape = &self.nodes[i].shape;
                    let (rows, cols) = match shape.as_slice() {
                        [c] => (1, *c),
                        [r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    let y = &self.nodes[i].data;
                    let mut da = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut local[a.0], &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    accumulate(&mut local[a.0], &da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    let da = vec![g[0] / n; self.nodes[a.0].data.len()];
                    accumulate(&mut local[a.0], &da);
                }
                Op::Dropout(a, mask) => {
                    let da: Vec<f64> = g.iter().zip(&mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut local[a.0], &da);
                }
            }
            let node = &mut self.nodes[i];
            for (dst, src) in node.grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        self.grads_populated = true;
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(existing) => {
            for (dst, src) in existing.iter_mut().zip(contribution) {
                *dst += src;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

/// C[m,n] = A[m,k] @ B[k,n]
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = G[m,n] @ B[k,n]^T
fn matmul_raw_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += g[i * n + j] * b[p * n + j];
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ G[m,n]
fn matmul_raw_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs a fresh graph from parameter values and returns the
/// graph, the parameter handles (in the same order as `point`), and the
/// scalar loss. Returns the maximum over all parameter coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
///
/// Evaluation points must avoid relu kinks (no pre-activation within `step`
/// of zero); any stochastic op inside `build` must be seeded identically on
/// every call.
pub fn finite_difference_check<F>(build: F, point: &[Vec<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<(Graph, Vec<TensorId>, TensorId)>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let (mut graph, params, loss) = build(point)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| graph.grad(*p).to_vec()).collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let (g, _, l) = build(values)?;
        Ok(g.value(l)[0])
    };

    let mut max_err: f64 = 0.0;
    for (pi, param) in point.iter().enumerate() {
        for j in 0..param.len() {
            let mut plus = point.to_vec();
            plus[pi][j] += step;
            let mut minus = point.to_vec();
            minus[pi][j] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi][j];
            let err = (a - fd).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> TensorId {
        g.leaf(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-1.0, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[4], &[0.0, 0.0, 0.0, 0.0]);
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn matmul_ones_row_sums() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[1.0; 6]);
        let b = leaf(&mut g, &[3, 1], &[1.0; 3]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_inner_mismatch_is_descriptive() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut g, &[2, 2], &[0.0; 4]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn grad_of_square_sum() {
        // loss = sum(x ∘ x) at x = [3] → grad = [6]
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_grad_is_p_minus_q() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[4], &[0.3, -1.2, 2.0, 0.5]);
        let q = leaf(&mut g, &[4], &[0.0, 0.0, 1.0, 0.0]);
        let p = g.softmax_rows(z).unwrap();
        let lp = g.log(p).unwrap();
        let prod = g.mul(q, lp).unwrap();
        let s = g.sum(prod).unwrap();
        let loss = g.scale(s, -1.0).unwrap();
        g.backward(loss).unwrap();
        let pv = g.value(p).to_vec();
        let qv = g.value(q).to_vec();
        for ((gz, pvi), qvi) in g.grad(z).iter().zip(&pv).zip(&qv) {
            assert!((gz - (pvi - qvi)).abs() < 1e-12, "{gz} vs {}", pvi - qvi);
        }
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[0.4, -0.7, 1.3]);
        let t = g.tanh(x).unwrap();
        let loss = g.mean(t).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(x).to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(Error::LossNotScalar { .. })
        ));
    }

    #[test]
    fn log_rejects_negative_entries() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[0.5, -0.1]);
        assert!(matches!(g.log(x), Err(Error::NonPositiveLog { index: 1, .. })));
    }

    #[test]
    fn log_clamps_underflowed_probabilities() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[0.0, 1.0]);
        let y = g.log(x).unwrap();
        assert_eq!(g.value(y)[0], MIN_PROB.ln());
        assert_eq!(g.value(y)[1], 0.0);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: f64 = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let mut g = Graph::new();
            let a = leaf(&mut g, &[6], &vals);
            let b = leaf(&mut g, &[6], &shifted);
            let pa = g.softmax_rows(a).unwrap();
            let pb = g.softmax_rows(b).unwrap();
            for (x, y) in g.value(pa).iter().zip(g.value(pb)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded(3);
        for _ in 0..50 {
            let rows = rng.random_range(1..5usize);
            let cols = rng.random_range(2..8usize);
            let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-8.0..8.0)).collect();
            let mut g = Graph::new();
            let x = g.leaf(&[rows, cols], vals).unwrap();
            let p = g.softmax_rows(x).unwrap();
            for r in 0..rows {
                let s: f64 = g.value(p)[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for v in &g.value(p)[r * cols..(r + 1) * cols] {
                    assert!(*v > 0.0 && *v < 1.0);
                }
            }
        }
    }

    #[test]
    fn dropout_seeded_is_deterministic_and_eval_is_identity() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&[10], (0..10).map(|i| i as f64).collect()).unwrap();
            let mut rng = seeded(42);
            let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(run(), run());

        let mut g = Graph::new();
        let x = g.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = seeded(42);
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::new();
        let x = g.leaf(&[1000], vec![1.0; 1000]).unwrap();
        let mut rng = seeded(9);
        let y = g.dropout(x, 0.25, true, &mut rng).unwrap();
        let v = g.value(y);
        let scale = 1.0 / 0.75;
        assert!(v.iter().all(|&e| e == 0.0 || (e - scale).abs() < 1e-15));
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        // ~750 expected; loose band
        assert!((650..=850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn identity_map_fd_error_is_zero() {
        // binary-exact point and step so the central difference is exact
        let check = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let x = g.leaf(&[3], p[0].clone())?;
                let loss = g.sum(x)?;
                Ok((g, vec![x], loss))
            },
            &[vec![0.5, -0.25, 1.0]],
            (2.0f64).powi(-20),
        )
        .unwrap();
        assert_eq!(check, 0.0);
    }

    #[test]
    fn quadratic_fd_error_tiny() {
        let check = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let x = g.leaf(&[4], p[0].clone())?;
                let sq = g.mul(x, x)?;
                let loss = g.sum(sq)?;
                Ok((g, vec![x], loss))
            },
            &[vec![0.5, -1.5, 2.0, 0.25]],
            1e-5,
        )
        .unwrap();
        assert!(check < 1e-6, "{check}");
    }

    #[test]
    fn tanh_net_matches_finite_differences() {
        // loss = mean(tanh(W x)) at seeded W, x
        let mut rng = seeded(17);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let check = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let w = g.leaf(&[3, 4], p[0].clone())?;
                let x = g.leaf(&[4, 1], p[1].clone())?;
                let h = g.matmul(w, x)?;
                let t = g.tanh(h)?;
                let loss = g.mean(t)?;
                Ok((g, vec![w, x], loss))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(check < 1e-4, "{check}");
    }

    #[test]
    fn softmax_ce_net_matches_finite_differences() {
        let mut rng = seeded(23);
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let check = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let w = g.leaf(&[3, 5], p[0].clone())?;
                let x = g.leaf(&[1, 3], vec![0.7, -0.2, 0.4])?;
                let q = g.leaf(&[1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0])?;
                let z = g.matmul(x, w)?;
                let pr = g.softmax_rows(z)?;
                let lp = g.log(pr)?;
                let prod = g.mul(q, lp)?;
                let s = g.sum(prod)?;
                let loss = g.scale(s, -1.0)?;
                Ok((g, vec![w], loss))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(check < 1e-4, "{check}");
    }

    #[test]
    fn every_op_matches_finite_differences_at_random_points() {
        use OpKind::*;
        let mut rng = seeded(101);
        let ops = [
            MatMul,
            Add,
            Sub,
            Scale,
            Relu,
            Tanh,
            Log,
            SoftmaxRows,
            Sum,
            Mean,
            ElementwiseMul,
            Dropout,
        ];
        for op in ops {
            for trial in 0..100 {
                let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, lo: f64, hi: f64| {
                    (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>()
                };
                // keep relu inputs away from the kink, log inputs positive
                let (point, shapes): (Vec<Vec<f64>>, Vec<Vec<usize>>) = match op {
                    MatMul => (
                        vec![draw(&mut rng, 6, -2.0, 2.0), draw(&mut rng, 8, -2.0, 2.0)],
                        vec![vec![3, 2], vec![2, 4]],
                    ),
                    Relu => {
                        let v: Vec<f64> = (0..5)
                            .map(|_| {
                                let x: f64 = rng.random_range(0.05..2.0);
                                if rng.random::<bool>() {
                                    x
                                } else {
                                    -x
                                }
                            })
                            .collect();
                        (vec![v], vec![vec![5]])
                    }
                    Log => (vec![draw(&mut rng, 5, 0.05, 3.0)], vec![vec![5]]),
                    Add | Sub | ElementwiseMul => (
                        vec![draw(&mut rng, 6, -2.0, 2.0), draw(&mut rng, 6, -2.0, 2.0)],
                        vec![vec![2, 3], vec![2, 3]],
                    ),
                    _ => (vec![draw(&mut rng, 6, -2.0, 2.0)], vec![vec![2, 3]]),
                };
                let scale_factor = rng.random_range(-2.0..2.0f64);
                let seed = trial as u64;
                let check = finite_difference_check(
                    |p| {
                        let mut g = Graph::new();
                        let ids: Vec<TensorId> = p
                            .iter()
                            .zip(&shapes)
                            .map(|(vals, sh)| g.leaf(sh, vals.clone()))
                            .collect::<Result<_>>()?;
                        let scalar = match op {
                            Scale => Some(scale_factor),
                            Dropout => Some(0.4),
                            _ => None,
                        };
                        let mut op_rng = seeded(seed);
                        let out = g.apply(op, &ids, scalar, Some(&mut op_rng))?;
                        // reduce to scalar through a fixed random weighting so
                        // every output coordinate contributes
                        let n: usize = g.shape(out).iter().product();
                        let mut wrng = seeded(seed.wrapping_add(500));
                        let weights = g.leaf(
                            g.shape(out).to_vec().as_slice(),
                            (0..n).map(|_| wrng.random_range(0.5..1.5)).collect(),
                        )?;
                        let weighted = g.mul(out, weights)?;
                        let loss = g.sum(weighted)?;
                        Ok((g, ids, loss))
                    },
                    &point,
                    1e-5,
                );
                let err = check.unwrap();
                assert!(err < 1e-4, "{op:?} trial {trial}: fd error {err}");
            }
        }
    }

    #[test]
    fn truncate_rolls_back_activations() {
        let mut g = Graph::new();
        let w = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mark = g.mark();
        for _ in 0..5 {
            let x = g.leaf(&[2, 1], vec![1.0, 1.0]).unwrap();
            let y = g.matmul(w, x).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            g.truncate(mark);
        }
        assert_eq!(g.len(), mark);
        // five accumulated backward passes, each contributing ones
        assert_eq!(g.grad(w), &[5.0, 5.0, 5.0, 5.0]);
    }
}
