//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Node indices are a topological order, so the
//! backward pass is a single reverse sweep.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use super::NumericsError;

/// Tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stable identifier of a learnable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Forward values are rounded to single precision after every op.
    F32,
}

/// Kind of a recorded op, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    StopGradient,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    BatchNorm,
    SliceCols,
    ConcatCols,
    GatherRows,
    ConcatRows,
    SegmentMax,
    SegmentMean,
    Sum,
    Mean,
    Reshape,
    CosineDistance,
    L2Normalize,
    Chamfer,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 30] = [
        OpKind::Leaf,
        OpKind::StopGradient,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::BatchNorm,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::SegmentMax,
        OpKind::SegmentMean,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::CosineDistance,
        OpKind::L2Normalize,
        OpKind::Chamfer,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::StopGradient => "stop_gradient",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SegmentMax => "segment_max",
            OpKind::SegmentMean => "segment_mean",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::CosineDistance => "cosine_distance",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Chamfer => "chamfer_l2",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, over_rows: bool },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    CosineDistance { a: Var, b: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    kind: OpKind,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records forward ops and replays them in reverse.
///
/// A tape is owned by one worker; independent tapes can run on separate
/// threads against shared read-only parameters.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision, fault: None }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Negates the gradient every `kind` node passes to its inputs; a
    /// faulted stop-gradient lets the gradient through instead. Used by
    /// mutation tests of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, kind: OpKind) -> Result<Var, NumericsError> {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: kind.name() });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, kind, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SegmentMax { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::CosineDistance { a, b } | Op::Chamfer { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>, kind: OpKind) -> Result<Var, NumericsError> {
        let v = self.push(value, Op::Leaf, kind)?;
        let node = &mut self.nodes[v.0];
        node.requires_grad = requires_grad;
        node.param = param;
        Ok(v)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, false, None, OpKind::Leaf)
    }

    /// Differentiable leaf that is not a parameter (its gradient is read with
    /// [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, true, None, OpKind::Leaf)
    }

    /// Differentiable leaf bound to a parameter id. Binding the same id more
    /// than once accumulates into one gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Result<Var, NumericsError> {
        self.leaf(value.clone(), true, Some(id), OpKind::Leaf)
    }

    /// `sg[x]`: same value, no gradient path back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, NumericsError> {
        if self.fault == Some(OpKind::StopGradient) {
            return self.scale(x, 1.0);
        }
        let value = self.value(x).clone();
        self.leaf(value, false, None, OpKind::StopGradient)
    }

    // ---- linear algebra ----

    /// `x[*, k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.shape().is_empty() || xs.cols() != ws.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", xs.shape(), ws.shape())));
        }
        let (m, k, n) = (xs.rows(), xs.cols(), ws.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(xs.data(), ws.data(), &mut out, m, k, n);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), OpKind::MatMul)
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), OpKind::MatMulNt)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("transpose", format!("{:?}", xv.shape())));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), OpKind::Transpose)
    }

    /// `y = x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), OpKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), OpKind::Mul)
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize, NumericsError> {
        let (xv, rv) = (self.value(x), self.value(r));
        if xv.shape().is_empty() || rv.len() != xv.cols() {
            return Err(shape_err(op, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        Ok(xv.cols())
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let c = self.row_check("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        self.push(t, Op::AddRow(x, row), OpKind::AddRow)
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let c = self.row_check("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        self.push(t, Op::MulRow(x, row), OpKind::MulRow)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor), OpKind::Scale)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), OpKind::AddScalar)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x), OpKind::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), OpKind::Relu)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(shape_err("softmax", "empty last axis".into()));
        }
        let c = xv.cols();
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(t, Op::Softmax(x), OpKind::Softmax)
    }

    /// Per-row normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        self.norm(x, gamma, beta, eps, false)
    }

    /// Per-column normalization over the batch (rows) with affine `gamma`,
    /// `beta`. Returns the output with the batch mean and biased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NumericsError> {
        let y = self.norm(x, gamma, beta, eps, true)?;
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += xv.data()[i * c + j] / n as f64;
            }
        }
        for i in 0..n {
            for (j, v) in var.iter_mut().enumerate() {
                let d = xv.data()[i * c + j] - mean[j];
                *v += d * d / n as f64;
            }
        }
        Ok((y, mean, var))
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, over_rows: bool) -> Result<Var, NumericsError> {
        let kind = if over_rows { OpKind::BatchNorm } else { OpKind::LayerNorm };
        if eps <= 0.0 {
            return Err(NumericsError::Contract(format!("{}: eps must be positive", kind.name())));
        }
        let c = self.row_check(kind.name(), x, gamma)?;
        self.row_check(kind.name(), x, beta)?;
        let xv = self.value(x);
        let n = xv.rows();
        let d = xv.data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        let rstd;
        if over_rows {
            let mut r = vec![0.0; c];
            for j in 0..c {
                let mean = (0..n).map(|i| d[i * c + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (d[i * c + j] - mean).powi(2)).sum::<f64>() / n as f64;
                r[j] = 1.0 / (var + eps).sqrt();
                for i in 0..n {
                    xhat[i * c + j] = (d[i * c + j] - mean) * r[j];
                }
            }
            rstd = r;
        } else {
            let mut r = vec![0.0; n];
            for i in 0..n {
                let row = &d[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                r[i] = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    xhat[i * c + j] = (row[j] - mean) * r[i];
                }
            }
            rstd = r;
        }
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Norm { x, gamma, beta, xhat, rstd, over_rows }, kind)
    }

    // ---- structural ----

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.cols() {
            return Err(shape_err("slice_cols", format!("{:?}[:, {}..{}]", xv.shape(), start, end)));
        }
        let (m, c, w) = (xv.rows(), xv.cols(), end - start);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, OpKind::SliceCols)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let m = xs.first().map(|&x| self.value(x).rows()).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if xs.iter().any(|&x| self.shape(x).len() != 2 || self.value(x).rows() != m) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(xs.to_vec()), OpKind::ConcatCols)
    }

    /// Rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("{:?} at {:?}", xv.shape(), idx)));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        self.push(Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows { x, idx: idx.to_vec() }, OpKind::GatherRows)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let c = xs.first().map(|&x| self.value(x).cols()).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        if xs.iter().any(|&x| self.shape(x).len() != 2 || self.value(x).cols() != c) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
            rows += self.value(x).rows();
        }
        self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(xs.to_vec()), OpKind::ConcatRows)
    }

    fn segment_dims(&self, op: &'static str, x: Var, group: usize) -> Result<(usize, usize), NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || group == 0 || xv.rows() % group != 0 {
            return Err(shape_err(op, format!("{:?} in groups of {}", xv.shape(), group)));
        }
        Ok((xv.rows() / group, xv.cols()))
    }

    /// Column-wise max over consecutive blocks of `group` rows. Ties route the
    /// gradient to the first maximal row.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Result<Var, NumericsError> {
        let (segs, c) = self.segment_dims("segment_max", x, group)?;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; segs * c];
        let mut argmax = vec![0usize; segs * c];
        for s in 0..segs {
            for r in s * group..(s + 1) * group {
                for j in 0..c {
                    let v = d[r * c + j];
                    if v > out[s * c + j] {
                        out[s * c + j] = v;
                        argmax[s * c + j] = r;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![segs, c], out)?, Op::SegmentMax { x, argmax }, OpKind::SegmentMax)
    }

    /// Column-wise mean over consecutive blocks of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var, NumericsError> {
        let (segs, c) = self.segment_dims("segment_mean", x, group)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            for r in s * group..(s + 1) * group {
                for j in 0..c {
                    out[s * c + j] += d[r * c + j];
                }
            }
        }
        for v in &mut out {
            *v /= group as f64;
        }
        self.push(Tensor::new(vec![segs, c], out)?, Op::SegmentMean { x, group }, OpKind::SegmentMean)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), OpKind::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), OpKind::Mean)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), OpKind::Reshape)
    }

    // ---- losses and row-wise reductions ----

    /// Per-row `1 − a·b / (|a||b|)`, shape `[rows]`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("cosine_distance", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let mut out = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let (x, y) = (av.row(i), bv.row(i));
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(NumericsError::Contract(format!("cosine_distance: zero-norm row {}", i)));
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.push(1.0 - dot / (nx * ny));
        }
        debug_assert!(c > 0);
        let n = out.len();
        self.push(Tensor::new(vec![n], out)?, Op::CosineDistance { a, b }, OpKind::CosineDistance)
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut t = xv.clone();
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            let n = norm(row);
            if n == 0.0 {
                return Err(NumericsError::Contract(format!("l2_normalize: zero-norm row {}", i)));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(t, Op::L2Normalize { x, norms }, OpKind::L2Normalize)
    }

    /// Symmetric l2 Chamfer distance between row sets `a[n, c]` and `b[m, c]`:
    /// mean over `a` of the squared distance to the nearest row of `b`, plus
    /// the same from `b` to `a`. Nearest-neighbour ties resolve to the lowest
    /// index.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("chamfer_l2", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        if av.rows() == 0 || bv.rows() == 0 {
            return Err(NumericsError::Contract("chamfer_l2: empty point set".into()));
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut best_ab = vec![(f64::INFINITY, 0usize); n];
        let mut best_ba = vec![(f64::INFINITY, 0usize); m];
        for i in 0..n {
            let x = av.row(i);
            for j in 0..m {
                let d2: f64 = x.iter().zip(bv.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                if d2 < best_ab[i].0 {
                    best_ab[i] = (d2, j);
                }
                if d2 < best_ba[j].0 {
                    best_ba[j] = (d2, i);
                }
            }
        }
        let value = best_ab.iter().map(|p| p.0).sum::<f64>() / n as f64 + best_ba.iter().map(|p| p.0).sum::<f64>() / m as f64;
        let nn_ab = best_ab.iter().map(|p| p.1).collect();
        let nn_ba = best_ba.iter().map(|p| p.1).collect();
        self.push(Tensor::scalar(value), Op::Chamfer { a, b, nn_ab, nn_ba }, OpKind::Chamfer)
    }

    /// Mean softmax cross-entropy of `logits[n, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if lv.shape().len() != 2 || labels.len() != n || n == 0 {
            return Err(shape_err("cross_entropy", format!("{:?} with {} labels", lv.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NumericsError::Contract(format!("cross_entropy: label {} outside {} classes", bad, c)));
        }
        let mut probs = lv.data().to_vec();
        probs.chunks_mut(c).for_each(softmax_in_place);
        // log-sum-exp keeps the value finite when a probability underflows
        let mut total = 0.0;
        for (row, &l) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let value = total / n as f64;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            OpKind::CrossEntropy,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let seed = Tensor::new(lv.shape().to_vec(), vec![1.0])?;
        self.backward_seeded(loss, seed)
    }

    /// Reverse sweep from `out` with an explicit upstream gradient, for
    /// chaining tapes.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients, NumericsError> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward", format!("seed {:?} for {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        let seed = seed.reshape(self.value(out).shape().to_vec())?;
        grads[out.0] = Some(seed);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                match params.get_mut(&id) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
            let sign = if self.fault == Some(node.kind) { -1.0 } else { 1.0 };
            self.backprop_node(node, &g, sign, &mut grads);
            if node.param.is_none() && matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, sign: f64, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let t = if sign < 0.0 { t.map(|x| -x) } else { t };
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * k];
                    matmul_nt_into(gd, wv.data(), &mut dx, m, n, k);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; k * n];
                    matmul_tn_into(xv.data(), gd, &mut dw, m, k, n);
                    acc(*w, Tensor::new(vec![k, n], dw).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, bv.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(gd, av.data(), &mut db, m, n, k);
                    acc(*b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (g.rows(), g.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = gd[i * m + j];
                    }
                }
                acc(*x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                let rv = self.value(*r);
                let c = rv.len();
                let mut dr = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    dr[i % c] += v;
                }
                acc(*r, Tensor::new(rv.shape().to_vec(), dr).unwrap());
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let c = rv.len();
                let rd = rv.data();
                let dx = gd.iter().enumerate().map(|(i, v)| v * rd[i % c]).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                let mut dr = vec![0.0; c];
                for (i, (v, xx)) in gd.iter().zip(xv.data()).enumerate() {
                    dr[i % c] += v * xx;
                }
                acc(*r, Tensor::new(rv.shape().to_vec(), dr).unwrap());
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = gd.iter().zip(xv.data()).map(|(gv, &xx)| gv * gelu_grad(xx)).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = gd.iter().zip(xv.data()).map(|(gv, &xx)| if xx > 0.0 { *gv } else { 0.0 }).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Norm { x, gamma, beta, xhat, rstd, over_rows } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (n, c) = (xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dgamma[j] += gd[i * c + j] * xhat[i * c + j];
                        dbeta[j] += gd[i * c + j];
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * c];
                    if *over_rows {
                        for j in 0..c {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for i in 0..n {
                                let dxh = gd[i * c + j] * gam[j];
                                m1 += dxh;
                                m2 += dxh * xhat[i * c + j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for i in 0..n {
                                let dxh = gd[i * c + j] * gam[j];
                                dx[i * c + j] = rstd[j] * (dxh - m1 - xhat[i * c + j] * m2);
                            }
                        }
                    } else {
                        for i in 0..n {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for j in 0..c {
                                let dxh = gd[i * c + j] * gam[j];
                                m1 += dxh;
                                m2 += dxh * xhat[i * c + j];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                let dxh = gd[i * c + j] * gam[j];
                                dx[i * c + j] = rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                acc(*gamma, Tensor::new(gshape, dgamma).unwrap());
                acc(*beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, c, w) = (xv.rows(), xv.cols(), g.cols());
                let mut dx = vec![0.0; m * c];
                for i in 0..m {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(xs) => {
                let (m, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    let mut dx = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dx.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    acc(x, Tensor::new(vec![m, w], dx).unwrap());
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += gd[r * c + j];
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    let shape = self.value(x).shape().to_vec();
                    acc(x, Tensor::new(shape, gd[offset..offset + n].to_vec()).unwrap());
                    offset += n;
                }
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (o, &r) in argmax.iter().enumerate() {
                    dx[r * c + o % c] += gd[o];
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::SegmentMean { x, group } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let s = r / group;
                    for j in 0..c {
                        dx[r * c + j] = gd[s * c + j] / *group as f64;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), gd[0] / xv.len() as f64));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape).unwrap());
            }
            Op::CosineDistance { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..av.rows() {
                    let (x, y) = (av.row(i), bv.row(i));
                    let (nx, ny) = (norm(x), norm(y));
                    let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
                    for j in 0..c {
                        // d(1 - cos)/dx = -(ŷ - cos·x̂)/|x|
                        da[i * c + j] = -gd[i] * (y[j] / ny - cos * x[j] / nx) / nx;
                        db[i * c + j] = -gd[i] * (x[j] / nx - cos * y[j] / ny) / ny;
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, c) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let (wa, wb) = (2.0 * gd[0] / n as f64, 2.0 * gd[0] / m as f64);
                for (i, &j) in nn_ab.iter().enumerate() {
                    for t in 0..c {
                        let diff = av.data()[i * c + t] - bv.data()[j * c + t];
                        da[i * c + t] += wa * diff;
                        db[j * c + t] -= wa * diff;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for t in 0..c {
                        let diff = bv.data()[j * c + t] - av.data()[i * c + t];
                        db[j * c + t] += wb * diff;
                        da[i * c + t] -= wb * diff;
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= 1.0;
                }
                for v in &mut dl {
                    *v *= gd[0] / n as f64;
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), dl).unwrap());
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Accumulated gradient of a parameter, `None` when the parameter was not
    /// bound on the tape or no gradient reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, zeros of `shape` when nothing reached it.
    pub fn param_or_zero(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.params.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradient of a differentiable non-parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
