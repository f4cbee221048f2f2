//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! The tape records every primitive operation eagerly (forward values are
//! computed at record time) and replays it backward once to fill gradient
//! buffers. Tensors are rank-1 or rank-2; there is no broadcasting beyond
//! scalar-tensor scaling, so shape bugs surface as [`CoreError::Dimension`]
//! at record time instead of silently misbehaving.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{CoreError, Result};

/// Shared numeric kernels. Both the tape operations and the plain (untaped)
/// evaluation paths call these, so the two paths produce bit-identical
/// results for the same operation order.
pub(crate) mod kernel {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    pub fn matvec(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &m[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn vecmat(v: &[f64], m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for j in 0..rows {
            let row = &m[j * cols..(j + 1) * cols];
            let vj = v[j];
            for i in 0..cols {
                out[i] += vj * row[i];
            }
        }
        out
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    pub fn scale(c: f64, a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| c * x).collect()
    }

    pub fn tanh(a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| x.tanh()).collect()
    }

    pub fn logistic(a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
    }

    pub fn leaky_relu(a: &[f64], slope: f64) -> Vec<f64> {
        a.iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    /// Max-subtracted softmax. Assumes the caller has verified finiteness.
    pub fn softmax(a: &[f64]) -> Vec<f64> {
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = a.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// Stable `-log softmax(logits)[target]`.
    pub fn neg_log_softmax_at(logits: &[f64], target: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        -(logits[target] - max - sum.ln())
    }
}

/// Shape of a tape value: rank-1 vector or rank-2 row-major matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Vector(usize),
    Matrix(usize, usize),
}

impl Dim {
    pub fn numel(self) -> usize {
        match self {
            Dim::Vector(n) => n,
            Dim::Matrix(r, c) => r * c,
        }
    }

    pub fn from_shape(shape: &[usize]) -> Result<Dim> {
        match shape {
            [n] => Ok(Dim::Vector(*n)),
            [r, c] => Ok(Dim::Matrix(*r, *c)),
            other => Err(CoreError::Contract(format!(
                "tensors are rank 1 or 2, got shape {other:?}"
            ))),
        }
    }

    pub fn to_shape(self) -> Vec<usize> {
        match self {
            Dim::Vector(n) => vec![n],
            Dim::Matrix(r, c) => vec![r, c],
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Vector(n) => write!(f, "[{n}]"),
            Dim::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// A dense 64-bit value with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Contract(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Dim::from_shape(&shape)?;
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self) -> Dim {
        Dim::from_shape(&self.shape).expect("tensor shape validated at construction")
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        match self.dim() {
            Dim::Matrix(_, c) => &self.data[i * c..(i + 1) * c],
            Dim::Vector(_) => panic!("row() on rank-1 tensor"),
        }
    }
}

/// Handle to a node on a [`Tape`]; identity of a value in the computation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(f64, Var),
    Tanh(Var),
    Logistic(Var),
    LeakyRelu(f64, Var),
    Softmax(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    CrossEntropy(Var, usize),
}

struct Node {
    dim: Dim,
    value: Vec<f64>,
    op: Op,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        std::mem::take(&mut self.grads[v.0])
    }
}

/// Record of primitive operations in topological order.
///
/// Owned by a single training step; values are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> Dim {
        self.nodes[v.0].dim
    }

    fn push(&mut self, dim: Dim, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { dim, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a parameter or constant as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.dim(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_vector(&mut self, data: Vec<f64>) -> Var {
        self.push(Dim::Vector(data.len()), data, Op::Leaf)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(CoreError::Contract(format!(
                "matrix leaf {rows}x{cols} requires {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(Dim::Matrix(rows, cols), data, Op::Leaf))
    }

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Dim, usize)> {
        let da = self.dim(a);
        let db = self.dim(b);
        if da != db {
            return Err(CoreError::Dimension {
                op: name,
                lhs: da.to_string(),
                rhs: db.to_string(),
            });
        }
        Ok((da, da.numel()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dim, _) = self.binary_same_shape("add", a, b)?;
        let value = kernel::add(self.value(a), self.value(b));
        Ok(self.push(dim, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dim, _) = self.binary_same_shape("sub", a, b)?;
        let value = kernel::sub(self.value(a), self.value(b));
        Ok(self.push(dim, value, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dim, _) = self.binary_same_shape("mul", a, b)?;
        let value = kernel::mul(self.value(a), self.value(b));
        Ok(self.push(dim, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, c: f64, a: Var) -> Var {
        let dim = self.dim(a);
        let value = kernel::scale(c, self.value(a));
        self.push(dim, value, Op::Scale(c, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let dim = self.dim(a);
        let value = kernel::tanh(self.value(a));
        self.push(dim, value, Op::Tanh(a))
    }

    /// Logistic sigmoid.
    pub fn logistic(&mut self, a: Var) -> Var {
        let dim = self.dim(a);
        let value = kernel::logistic(self.value(a));
        self.push(dim, value, Op::Logistic(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let dim = self.dim(a);
        let value = kernel::leaky_relu(self.value(a), slope);
        self.push(dim, value, Op::LeakyRelu(slope, a))
    }

    /// Max-subtracted softmax over a vector of scores.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let dim = self.dim(a);
        let n = match dim {
            Dim::Vector(n) => n,
            Dim::Matrix(..) => {
                return Err(CoreError::Dimension {
                    op: "softmax",
                    lhs: dim.to_string(),
                    rhs: "[n]".to_string(),
                })
            }
        };
        if n == 0 {
            return Err(CoreError::Contract("softmax over empty vector".into()));
        }
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric("softmax input is not finite".into()));
        }
        let value = kernel::softmax(self.value(a));
        Ok(self.push(dim, value, Op::Softmax(a)))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        let (m, k, k2, n) = match (da, db) {
            (Dim::Matrix(m, k), Dim::Matrix(k2, n)) => (m, k, k2, n),
            _ => {
                return Err(CoreError::Dimension {
                    op: "matmul",
                    lhs: da.to_string(),
                    rhs: db.to_string(),
                })
            }
        };
        if k != k2 {
            return Err(CoreError::Dimension {
                op: "matmul",
                lhs: da.to_string(),
                rhs: db.to_string(),
            });
        }
        let value = kernel::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(Dim::Matrix(m, n), value, Op::MatMul(a, b)))
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (dm, dv) = (self.dim(m), self.dim(v));
        let (rows, cols) = match (dm, dv) {
            (Dim::Matrix(r, c), Dim::Vector(n)) if c == n => (r, c),
            _ => {
                return Err(CoreError::Dimension {
                    op: "matvec",
                    lhs: dm.to_string(),
                    rhs: dv.to_string(),
                })
            }
        };
        let value = kernel::matvec(self.value(m), self.value(v), rows, cols);
        Ok(self.push(Dim::Vector(rows), value, Op::MatVec(m, v)))
    }

    /// `[k] x [k,n] -> [n]`; row-weighted sum of the matrix.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (dv, dm) = (self.dim(v), self.dim(m));
        let (rows, cols) = match (dv, dm) {
            (Dim::Vector(n), Dim::Matrix(r, c)) if n == r => (r, c),
            _ => {
                return Err(CoreError::Dimension {
                    op: "vecmat",
                    lhs: dv.to_string(),
                    rhs: dm.to_string(),
                })
            }
        };
        let value = kernel::vecmat(self.value(v), self.value(m), rows, cols);
        Ok(self.push(Dim::Vector(cols), value, Op::VecMat(v, m)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        match (da, db) {
            (Dim::Vector(n), Dim::Vector(m)) if n == m => {}
            _ => {
                return Err(CoreError::Dimension {
                    op: "dot",
                    lhs: da.to_string(),
                    rhs: db.to_string(),
                })
            }
        }
        let value = vec![kernel::dot(self.value(a), self.value(b))];
        Ok(self.push(Dim::Vector(1), value, Op::Dot(a, b)))
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat of zero parts".into()));
        }
        let mut value = Vec::new();
        for &p in parts {
            match self.dim(p) {
                Dim::Vector(_) => value.extend_from_slice(self.value(p)),
                d => {
                    return Err(CoreError::Dimension {
                        op: "concat",
                        lhs: d.to_string(),
                        rhs: "[n]".to_string(),
                    })
                }
            }
        }
        let n = value.len();
        Ok(self.push(Dim::Vector(n), value, Op::Concat(parts.to_vec())))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(CoreError::Contract("stack_rows of zero rows".into()));
        }
        let width = match self.dim(rows[0]) {
            Dim::Vector(n) => n,
            d => {
                return Err(CoreError::Dimension {
                    op: "stack_rows",
                    lhs: d.to_string(),
                    rhs: "[n]".to_string(),
                })
            }
        };
        let mut value = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let d = self.dim(r);
            if d != Dim::Vector(width) {
                return Err(CoreError::Dimension {
                    op: "stack_rows",
                    lhs: d.to_string(),
                    rhs: Dim::Vector(width).to_string(),
                });
            }
            value.extend_from_slice(self.value(r));
        }
        Ok(self.push(
            Dim::Matrix(rows.len(), width),
            value,
            Op::StackRows(rows.to_vec()),
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let (rows, cols) = match self.dim(m) {
            Dim::Matrix(r, c) => (r, c),
            d => {
                return Err(CoreError::Dimension {
                    op: "row",
                    lhs: d.to_string(),
                    rhs: "[r x c]".to_string(),
                })
            }
        };
        if i >= rows {
            return Err(CoreError::Contract(format!(
                "row {i} out of bounds for {rows} rows"
            )));
        }
        let value = self.value(m)[i * cols..(i + 1) * cols].to_vec();
        Ok(self.push(Dim::Vector(cols), value, Op::Row(m, i)))
    }

    /// Sum of all entries, as a length-1 vector.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(Dim::Vector(1), value, Op::Sum(a))
    }

    /// Stable `-log softmax(logits)[target]`, as a length-1 vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = match self.dim(logits) {
            Dim::Vector(n) => n,
            d => {
                return Err(CoreError::Dimension {
                    op: "cross_entropy",
                    lhs: d.to_string(),
                    rhs: "[n]".to_string(),
                })
            }
        };
        if target >= n {
            return Err(CoreError::Contract(format!(
                "cross_entropy target {target} out of range for {n} classes"
            )));
        }
        let value = vec![kernel::neg_log_softmax_at(self.value(logits), target)];
        Ok(self.push(Dim::Vector(1), value, Op::CrossEntropy(logits, target)))
    }

    /// Mean of scalar (length-1) nodes.
    pub fn mean_scalars(&mut self, items: &[Var]) -> Result<Var> {
        for &v in items {
            if self.dim(v).numel() != 1 {
                return Err(CoreError::Contract(
                    "mean_scalars expects length-1 nodes".into(),
                ));
            }
        }
        let all = self.concat(items)?;
        let total = self.sum(all);
        Ok(self.scale(1.0 / items.len() as f64, total))
    }

    /// Reverse pass from a scalar loss. Fills a gradient buffer for every
    /// node; nodes the loss does not depend on keep zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dim(loss).numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got {}",
                self.dim(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.dim.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].iter().all(|g| *g == 0.0) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let gout: &[f64] = &hi[0];
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut lo[a.0], 1.0, gout);
                    axpy(&mut lo[b.0], 1.0, gout);
                }
                Op::Sub(a, b) => {
                    axpy(&mut lo[a.0], 1.0, gout);
                    axpy(&mut lo[b.0], -1.0, gout);
                }
                Op::Mul(a, b) => {
                    {
                        let vb = &self.nodes[b.0].value;
                        let ga = &mut lo[a.0];
                        for i in 0..gout.len() {
                            ga[i] += gout[i] * vb[i];
                        }
                    }
                    let va = &self.nodes[a.0].value;
                    let gb = &mut lo[b.0];
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * va[i];
                    }
                }
                Op::Scale(c, a) => axpy(&mut lo[a.0], *c, gout),
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &mut lo[a.0];
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Logistic(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &mut lo[a.0];
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::LeakyRelu(slope, a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = &mut lo[a.0];
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * if x[i] >= 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[id].value;
                    let inner = kernel::dot(gout, y);
                    let ga = &mut lo[a.0];
                    for i in 0..gout.len() {
                        ga[i] += y[i] * (gout[i] - inner);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = match self.nodes[a.0].dim {
                        Dim::Matrix(m, k) => (m, k),
                        _ => unreachable!(),
                    };
                    let n = match self.nodes[b.0].dim {
                        Dim::Matrix(_, n) => n,
                        _ => unreachable!(),
                    };
                    {
                        // dA = G . B^T
                        let vb = &self.nodes[b.0].value;
                        let ga = &mut lo[a.0];
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for l in 0..n {
                                    acc += gout[i * n + l] * vb[j * n + l];
                                }
                                ga[i * k + j] += acc;
                            }
                        }
                    }
                    // dB = A^T . G
                    let va = &self.nodes[a.0].value;
                    let gb = &mut lo[b.0];
                    for j in 0..k {
                        for l in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += va[i * k + j] * gout[i * n + l];
                            }
                            gb[j * n + l] += acc;
                        }
                    }
                }
                Op::MatVec(m, v) => {
                    let (rows, cols) = match self.nodes[m.0].dim {
                        Dim::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    {
                        let vv = &self.nodes[v.0].value;
                        let gm = &mut lo[m.0];
                        for i in 0..rows {
                            for j in 0..cols {
                                gm[i * cols + j] += gout[i] * vv[j];
                            }
                        }
                    }
                    let vm = &self.nodes[m.0].value;
                    let gv = &mut lo[v.0];
                    for i in 0..rows {
                        let gi = gout[i];
                        let row = &vm[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gv[j] += gi * row[j];
                        }
                    }
                }
                Op::VecMat(v, m) => {
                    let (rows, cols) = match self.nodes[m.0].dim {
                        Dim::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    {
                        let vm = &self.nodes[m.0].value;
                        let gv = &mut lo[v.0];
                        for j in 0..rows {
                            gv[j] += kernel::dot(gout, &vm[j * cols..(j + 1) * cols]);
                        }
                    }
                    let vv = &self.nodes[v.0].value;
                    let gm = &mut lo[m.0];
                    for j in 0..rows {
                        let vj = vv[j];
                        for i in 0..cols {
                            gm[j * cols + i] += vj * gout[i];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let g = gout[0];
                    {
                        let vb = &self.nodes[b.0].value;
                        axpy(&mut lo[a.0], g, vb);
                    }
                    let va = &self.nodes[a.0].value;
                    axpy(&mut lo[b.0], g, va);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].dim.numel();
                        axpy(&mut lo[p.0], 1.0, &gout[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::StackRows(rows) => {
                    let width = match self.nodes[id].dim {
                        Dim::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut lo[r.0], 1.0, &gout[i * width..(i + 1) * width]);
                    }
                }
                Op::Row(m, i) => {
                    let cols = gout.len();
                    axpy(&mut lo[m.0][i * cols..(i + 1) * cols], 1.0, gout);
                }
                Op::Sum(a) => {
                    let g = gout[0];
                    for x in lo[a.0].iter_mut() {
                        *x += g;
                    }
                }
                Op::CrossEntropy(logits, target) => {
                    let g = gout[0];
                    let probs = kernel::softmax(&self.nodes[logits.0].value);
                    let gl = &mut lo[logits.0];
                    for i in 0..probs.len() {
                        let indicator = if i == *target { 1.0 } else { 0.0 };
                        gl[i] += g * (probs[i] - indicator);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for i in 0..dst.len() {
        dst[i] += a * src[i];
    }
}

/// Largest relative error between paired entries, with an absolute floor on
/// the denominator so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / a.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(
        data: &mut Vec<f64>,
        eps: f64,
        mut loss: impl FnMut(&[f64]) -> f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for i in 0..data.len() {
            let orig = data[i];
            data[i] = orig + eps;
            let up = loss(data);
            data[i] = orig - eps;
            let down = loss(data);
            data[i] = orig;
            out[i] = (up - down) / (2.0 * eps);
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .leaf_matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = tape.leaf_matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_rows() {
        let mut tape = Tape::new();
        let p = tape.leaf_matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let a = tape.leaf_matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(p, a).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.leaf_matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[2x2]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Weighted sum keeps the loss sensitive to every output entry.
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let loss_of = |a: &[f64], b: &[f64], w: &[f64]| -> f64 {
            let c = kernel::matmul(a, b, 3, 4, 2);
            kernel::dot(&c, w)
        };

        let mut tape = Tape::new();
        let va = tape.leaf_matrix(3, 4, a.clone()).unwrap();
        let vb = tape.leaf_matrix(4, 2, b.clone()).unwrap();
        let vc = tape.matmul(va, vb).unwrap();
        let vw = tape.leaf_matrix(3, 2, w.clone()).unwrap();
        let prod = tape.mul(vc, vw).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();

        let fd_a = fd_grad(&mut a, 1e-5, |x| loss_of(x, &b, &w));
        let fd_b = fd_grad(&mut b, 1e-5, |x| loss_of(&a, x, &w));
        assert!(max_rel_err(grads.of(va), &fd_a, 1e-8) < 1e-4);
        assert!(max_rel_err(grads.of(vb), &fd_b, 1e-8) < 1e-4);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.leaf_vector(vec![0.0, 0.0, 0.0]);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t), &[0.0, 0.0, 0.0]);

        let a = tape.leaf_vector(vec![1.0, 2.0]);
        let b = tape.leaf_vector(vec![3.0, 4.0]);
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[3.0, 8.0]);

        let s = tape.logistic(z);
        assert_eq!(tape.value(s), &[0.5, 0.5, 0.5]);

        let c = tape.leaf_vector(vec![1.0]);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let equal = tape.leaf_vector(vec![2.5, 2.5, 2.5]);
        let s = tape.softmax(equal).unwrap();
        for &p in tape.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let two = tape.leaf_vector(vec![1.0, 0.0]);
        let s2 = tape.softmax(two).unwrap();
        assert!((tape.value(s2)[0] - 0.7311).abs() < 1e-4);
        assert!((tape.value(s2)[1] - 0.2689).abs() < 1e-4);

        let one = tape.leaf_vector(vec![42.0]);
        let s1 = tape.softmax(one).unwrap();
        assert_eq!(tape.value(s1), &[1.0]);

        let bad = tape.leaf_vector(vec![f64::NAN, 1.0]);
        assert!(matches!(
            tape.softmax(bad),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn softmax_is_shift_invariant_probability_vector() {
        let scores = vec![0.3, -1.2, 4.0, 0.0, 2.2];
        let mut tape = Tape::new();
        let a = tape.leaf_vector(scores.clone());
        let s = tape.softmax(a).unwrap();
        let sum: f64 = tape.value(s).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(tape.value(s).iter().all(|&p| p >= 0.0));

        let shifted = tape.leaf_vector(scores.iter().map(|x| x + 123.456).collect());
        let s2 = tape.softmax(shifted).unwrap();
        for (p, q) in tape.value(s).iter().zip(tape.value(s2)) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf_vector(vec![5.0, -1.0, 2.0]);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf_vector(vec![2.0, 3.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w), &[4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf_vector(vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(w),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf_vector(vec![1.0, 2.0]);
        let unused = tape.leaf_vector(vec![7.0]);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(unused), &[0.0]);
    }

    #[test]
    fn cross_entropy_backward_is_softmax_minus_onehot() {
        let mut logits = vec![0.4, -0.2, 1.1, 0.0];
        let mut tape = Tape::new();
        let v = tape.leaf_vector(logits.clone());
        let loss = tape.cross_entropy(v, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let fd = fd_grad(&mut logits, 1e-5, |x| kernel::neg_log_softmax_at(x, 2));
        assert!(max_rel_err(grads.of(v), &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf_vector(vec![0.1, -0.7, 0.3]);
            let b = tape.leaf_vector(vec![1.3, 0.2, -0.9]);
            let p = tape.mul(a, b).unwrap();
            let t = tape.tanh(p);
            let s = tape.softmax(t).unwrap();
            let loss = tape.cross_entropy(s, 1).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).to_vec(),
                grads.of(a).to_vec(),
                grads.of(b).to_vec(),
            )
        };
        let (l1, ga1, gb1) = run();
        let (l2, ga2, gb2) = run();
        assert!(l1 == l2 && ga1 == ga2 && gb1 == gb2);
    }

    #[test]
    fn stack_and_row_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf_vector(vec![1.0, 2.0]);
        let b = tape.leaf_vector(vec![3.0, 4.0]);
        let m = tape.stack_rows(&[a, b]).unwrap();
        let r1 = tape.row(m, 1).unwrap();
        assert_eq!(tape.value(r1), &[3.0, 4.0]);
        let loss = tape.sum(r1);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(b), &[1.0, 1.0]);
        assert_eq!(grads.of(a), &[0.0, 0.0]);
    }
}
