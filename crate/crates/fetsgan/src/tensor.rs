//! Dense tensors on a reverse-mode automatic-differentiation tape.
//!
//! The tape records every operation eagerly: building an expression computes
//! its value immediately and appends a node describing how it was produced.
//! [`Tape::backward`] then walks the nodes in reverse, accumulating gradients
//! into every leaf created with `requires_grad`.
//!
//! Tensors are rank-1 or rank-2 (a rank-1 tensor of length `n` behaves as a
//! `1 × n` row vector). That is all the recurrent and fully connected
//! networks in this crate need; there is no general broadcasting.

use crate::scalar::Scalar;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: range {start}..{end} out of bounds for size {size}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    LeakyRelu(TensorId, f64),
    ConcatCols(TensorId, TensorId),
    SliceCols(TensorId, usize),
    SliceRows(TensorId, usize),
    Mean(TensorId),
    Sum(TensorId),
    SumSq(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    BceWithLogits(TensorId, TensorId),
}

/// One value in the computation graph.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
    op: Op,
}

impl<F: Scalar> Tensor<F> {
    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Recorded computation graph. Nodes only reference earlier nodes, so the
/// insertion order is a topological order and `backward` is a single reverse
/// sweep.
pub struct Tape<F> {
    nodes: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn validate_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(EngineError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "rank must be 1 or 2",
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(EngineError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive",
        });
    }
    if shape.iter().product::<usize>() != len {
        return Err(EngineError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "element count does not match shape",
        });
    }
    Ok(())
}

// Work below this many multiply-accumulates is not worth a rayon dispatch.
const PAR_GEMM_THRESHOLD: usize = 1 << 17;
// Fixed row chunking keeps parallel results bit-identical to serial ones:
// every output element is produced by one gemm call whose internal summation
// order does not depend on the thread count.
const PAR_GEMM_ROWS: usize = 32;

fn gemm_rowmajor<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    rsa: usize,
    csa: usize,
    b: &[F],
    rsb: usize,
    csb: usize,
    c: &mut [F],
    acc: bool,
) {
    if m * k * n >= PAR_GEMM_THRESHOLD && m > PAR_GEMM_ROWS {
        c[..m * n]
            .par_chunks_mut(PAR_GEMM_ROWS * n)
            .enumerate()
            .for_each(|(chunk, c_sub)| {
                let r0 = chunk * PAR_GEMM_ROWS;
                let rows = c_sub.len() / n;
                F::gemm(rows, k, n, &a[r0 * rsa..], rsa, csa, b, rsb, csb, c_sub, acc);
            });
    } else {
        F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, acc);
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert an input tensor. Gradients accumulate into it during
    /// `backward` when `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<F>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        validate_shape(shape, data.len(), "leaf")?;
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Insert a constant (a leaf that never receives gradient).
    pub fn constant(&mut self, data: Vec<F>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: F) -> TensorId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<TensorId> {
        let len = shape.iter().product();
        self.constant(vec![F::zero(); len], shape)
    }

    fn binary_shapes(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        Ok(())
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        let (m, k) = (na.rows(), na.cols());
        let (k2, n) = (nb.rows(), nb.cols());
        if k != k2 {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_rowmajor(m, k, n, &na.data, k, 1, &nb.data, n, 1, &mut out, false);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn elementwise_binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<TensorId> {
        self.binary_shapes(op_name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let data: Vec<F> = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, data, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a row vector `b` (shape `[n]` or `[1, n]`) to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (nx, nb) = (self.node(x), self.node(b));
        let n = nx.cols();
        if nb.rows() != 1 || nb.cols() != n {
            return Err(EngineError::ShapeMismatch {
                op: "add_bias",
                lhs: nx.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let mut data = nx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&nb.data) {
                *v += bv;
            }
        }
        let shape = nx.shape.clone();
        let rg = nx.requires_grad || nb.requires_grad;
        Ok(self.push(shape, data, rg, Op::AddBias(x, b)))
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(F) -> F, op: Op) -> TensorId {
        let nx = self.node(x);
        let data: Vec<F> = nx.data.iter().map(|&v| f(v)).collect();
        let shape = nx.shape.clone();
        let rg = nx.requires_grad;
        self.push(shape, data, rg, op)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| F::one() / (F::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        let a = F::from_f64(slope);
        self.unary(
            x,
            |v| if v > F::zero() { v } else { a * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let cf = F::from_f64(c);
        self.unary(x, |v| v * cf, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let cf = F::from_f64(c);
        self.unary(x, |v| v + cf, Op::AddScalar(x))
    }

    /// Concatenate along the last axis: `m×n1 ⊕ m×n2 → m×(n1+n2)`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        let m = na.rows();
        if nb.rows() != m {
            return Err(EngineError::ShapeMismatch {
                op: "concat_cols",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (n1, n2) = (na.cols(), nb.cols());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(&na.data[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&nb.data[i * n2..(i + 1) * n2]);
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n1 + n2], data, rg, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let nx = self.node(x);
        let (m, n) = (nx.rows(), nx.cols());
        if len == 0 || start + len > n {
            return Err(EngineError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&nx.data[i * n + start..i * n + start + len]);
        }
        let rg = nx.requires_grad;
        Ok(self.push(vec![m, len], data, rg, Op::SliceCols(x, start)))
    }

    /// Rows `start..start+len` of `x`.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let nx = self.node(x);
        let (m, n) = (nx.rows(), nx.cols());
        if len == 0 || start + len > m {
            return Err(EngineError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                size: m,
            });
        }
        let data = nx.data[start * n..(start + len) * n].to_vec();
        let rg = nx.requires_grad;
        Ok(self.push(vec![len, n], data, rg, Op::SliceRows(x, start)))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let nx = self.node(x);
        let n = F::from_f64(nx.data.len() as f64);
        let mut acc = F::zero();
        for &v in &nx.data {
            acc += v;
        }
        let rg = nx.requires_grad;
        self.push(vec![1], vec![acc / n], rg, Op::Mean(x))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let nx = self.node(x);
        let mut acc = F::zero();
        for &v in &nx.data {
            acc += v;
        }
        let rg = nx.requires_grad;
        self.push(vec![1], vec![acc], rg, Op::Sum(x))
    }

    /// Sum of squared elements, as a scalar node.
    pub fn sum_sq(&mut self, x: TensorId) -> TensorId {
        let nx = self.node(x);
        let mut acc = F::zero();
        for &v in &nx.data {
            acc += v * v;
        }
        let rg = nx.requires_grad;
        self.push(vec![1], vec![acc], rg, Op::SumSq(x))
    }

    /// Mean binary cross-entropy between `logits` and constant `targets`,
    /// computed in the numerically stable logits form.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        self.binary_shapes("bce_with_logits", logits, targets)?;
        if self.node(targets).requires_grad {
            return Err(EngineError::Contract(
                "bce_with_logits: targets must not require grad".into(),
            ));
        }
        let (nl, nt) = (self.node(logits), self.node(targets));
        let mut acc = F::zero();
        for (&s, &y) in nl.data.iter().zip(&nt.data) {
            // max(s, 0) - s*y + ln(1 + exp(-|s|))
            let pos = if s > F::zero() { s } else { F::zero() };
            acc += pos - s * y + (F::one() + (-s.abs()).exp()).ln();
        }
        let n = F::from_f64(nl.data.len() as f64);
        let rg = nl.requires_grad;
        Ok(self.push(vec![1], vec![acc / n], rg, Op::BceWithLogits(logits, targets)))
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [F] {
        let node = &mut self.nodes[id.0];
        let len = node.data.len();
        node.grad.get_or_insert_with(|| vec![F::zero(); len])
    }

    fn add_grad(&mut self, id: TensorId, g: &[F]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (dst, &src) in buf.iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Accumulate `∂loss/∂leaf` into every reachable tensor that requires
    /// grad. Multiple uses of the same tensor sum their path gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(EngineError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.grad_buf(loss)[0] = F::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.node(a).rows(), self.node(a).cols());
                    let n = self.node(b).cols();
                    if self.nodes[a.0].requires_grad {
                        // dA += G · Bᵀ
                        let mut da = vec![F::zero(); m * k];
                        gemm_rowmajor(m, n, k, &g, n, 1, &self.node(b).data, 1, n, &mut da, false);
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB += Aᵀ · G
                        let mut db = vec![F::zero(); k * n];
                        gemm_rowmajor(k, m, n, &self.node(a).data, 1, k, &g, n, 1, &mut db, false);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    if self.nodes[b.0].requires_grad {
                        let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                        self.add_grad(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<F> =
                            g.iter().zip(&self.node(b).data).map(|(&gv, &bv)| gv * bv).collect();
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<F> =
                            g.iter().zip(&self.node(a).data).map(|(&gv, &av)| gv * av).collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::AddBias(x, b) => {
                    self.add_grad(x, &g);
                    if self.nodes[b.0].requires_grad {
                        let n = self.node(b).cols();
                        let mut db = vec![F::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Tanh(x) => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(&gv, &y)| gv * (F::one() - y * y))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(&gv, &y)| gv * y * (F::one() - y))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let a = F::from_f64(slope);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.node(x).data)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * a })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::ConcatCols(a, b) => {
                    let m = self.node(a).rows();
                    let (n1, n2) = (self.node(a).cols(), self.node(b).cols());
                    if self.nodes[a.0].requires_grad {
                        let mut da = Vec::with_capacity(m * n1);
                        for i in 0..m {
                            da.extend_from_slice(&g[i * (n1 + n2)..i * (n1 + n2) + n1]);
                        }
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = Vec::with_capacity(m * n2);
                        for i in 0..m {
                            db.extend_from_slice(&g[i * (n1 + n2) + n1..(i + 1) * (n1 + n2)]);
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::SliceCols(x, start) => {
                    let (m, n) = (self.node(x).rows(), self.node(x).cols());
                    let len = self.nodes[i].shape[1];
                    let mut dx = vec![F::zero(); m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::SliceRows(x, start) => {
                    let n = self.node(x).cols();
                    let total = self.node(x).data.len();
                    let mut dx = vec![F::zero(); total];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    self.add_grad(x, &dx);
                }
                Op::Mean(x) => {
                    let len = self.node(x).data.len();
                    let gv = g[0] / F::from_f64(len as f64);
                    let dx = vec![gv; len];
                    self.add_grad(x, &dx);
                }
                Op::Sum(x) => {
                    let len = self.node(x).data.len();
                    let dx = vec![g[0]; len];
                    self.add_grad(x, &dx);
                }
                Op::SumSq(x) => {
                    let two = F::from_f64(2.0);
                    let dx: Vec<F> = self.node(x).data.iter().map(|&v| two * v * g[0]).collect();
                    self.add_grad(x, &dx);
                }
                Op::Scale(x, c) => {
                    let cf = F::from_f64(c);
                    let dx: Vec<F> = g.iter().map(|&gv| gv * cf).collect();
                    self.add_grad(x, &dx);
                }
                Op::AddScalar(x) => {
                    self.add_grad(x, &g);
                }
                Op::BceWithLogits(logits, targets) => {
                    let n = F::from_f64(self.node(logits).data.len() as f64);
                    let dx: Vec<F> = self
                        .node(logits)
                        .data
                        .iter()
                        .zip(&self.node(targets).data)
                        .map(|(&s, &y)| {
                            let sig = F::one() / (F::one() + (-s).exp());
                            g[0] * (sig - y) / n
                        })
                        .collect();
                    self.add_grad(logits, &dx);
                }
            }
        }
        Ok(())
    }
}
