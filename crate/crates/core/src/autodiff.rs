//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; a [`Var`] is an index into
//! it. Construction order is topological by definition, so [`Tape::backward`]
//! is one reverse sweep that accumulates gradients into per-node slots.
//! Constants and parameters are both leaves; only nodes reachable from a
//! parameter carry `requires_grad`, and [`Tape::stop_gradient`] forwards its
//! input unchanged while contributing exactly zero to every ancestor.
//!
//! Every forward op traps non-finite results, and every reduction runs in a
//! fixed sequential order so results are reproducible bit for bit.

use crate::dense::{self, Mat};
use crate::sparse::SparseOperand;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    StopGradient,
    Matmul(usize, usize),
    SparseDense { operand: SparseOperand, rhs: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    ScalarTensorMul { scalar: usize, mat: usize },
    Transpose(usize),
    RowSoftmax { x: usize, temperature: f64 },
    Exp(usize),
    Log(usize),
    Square(usize),
    SqrtEps(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Prelu { x: usize, slope: usize },
    Elu(usize),
    L2NormalizeRows(usize),
    BatchNorm { x: usize, epsilon: f64 },
    Hinge { x: usize, threshold: f64 },
    GatherRows { x: usize, indices: Vec<usize> },
    AddBias { x: usize, bias: usize },
    ColCenter(usize),
    DiagPart(usize),
    ZeroDiag(usize),
    PairwiseSqdist(usize),
    ConcatScalars(Vec<usize>),
    ConcatCols(Vec<usize>),
    Entry { x: usize, row: usize, col: usize },
}

struct Node {
    value: Mat,
    requires_grad: bool,
    op: Op,
}

/// Stabilising epsilon used by batch normalisation.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Rows with L2 norm below this are treated as zero by row normalisation.
const ZERO_ROW_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Trainable leaf; [`Tape::backward`] fills its gradient slot.
    pub fn parameter(&mut self, value: Mat) -> Var {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient computed by the last [`Tape::backward`] call. `None` for
    /// nodes outside the differentiable cone of the loss.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_unchecked(&mut self, value: Mat, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Mat, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ---- primitive ops ---------------------------------------------------

    /// Forward identity whose backward pass contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_unchecked(value, false, Op::StopGradient)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Self::shape_err("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let mut out = Mat::zeros(ar, bc);
        dense::matmul_into(&mut out, self.value(a), self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", out, rg, Op::Matmul(a.0, b.0))
    }

    /// `operand.mat * rhs` where the sparse side is a constant.
    pub fn sparse_dense_matmul(&mut self, operand: &SparseOperand, rhs: Var) -> Result<Var> {
        let (rr, _) = self.value(rhs).shape();
        if operand.mat.cols() != rr {
            return Err(Self::shape_err(
                "sparse_dense_matmul",
                format!("{}x{} * {}x{}", operand.mat.rows(), operand.mat.cols(), rr, self.value(rhs).cols()),
            ));
        }
        let out = operand.mat.matmul_dense(self.value(rhs));
        let rg = self.requires_grad(rhs);
        self.push(
            "sparse_dense_matmul",
            out,
            rg,
            Op::SparseDense { operand: operand.clone(), rhs: rhs.0 },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, Mat::from_vec(r, c, data), rg, op)
    }

    pub fn scalar_mul(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push("scalar_mul", out, rg, Op::ScalarMul(x.0, factor))
    }

    /// Multiply a matrix by a 1x1 tape value (used to mix relation graphs).
    pub fn scalar_tensor_mul(&mut self, scalar: Var, mat: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(Self::shape_err(
                "scalar_tensor_mul",
                format!("scalar operand has shape {:?}", self.value(scalar).shape()),
            ));
        }
        let s = self.value(scalar).scalar();
        let out = self.value(mat).map(|v| v * s);
        let rg = self.requires_grad(scalar) || self.requires_grad(mat);
        self.push("scalar_tensor_mul", out, rg, Op::ScalarTensorMul { scalar: scalar.0, mat: mat.0 })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let rg = self.requires_grad(x);
        self.push("transpose", out, rg, Op::Transpose(x.0))
    }

    /// Row-wise `softmax(x / temperature)`, max-stabilised.
    pub fn row_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "row_softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if c == 0 {
            return Err(Self::shape_err("row_softmax", "zero columns".into()));
        }
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                mx = mx.max(v / temperature);
            }
            let orow = out.row_mut(i);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v / temperature - mx).exp();
                *o = e;
                z += e;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.requires_grad(x);
        self.push("row_softmax", out, rg, Op::RowSoftmax { x: x.0, temperature })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.requires_grad(x);
        self.push("exp", out, rg, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        let rg = self.requires_grad(x);
        self.push("log", out, rg, Op::Log(x.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.requires_grad(x);
        self.push("square", out, rg, Op::Square(x.0))
    }

    /// `sqrt(x + epsilon)`, the stabilised square root used by the variance
    /// hinge.
    pub fn sqrt_eps(&mut self, x: Var, epsilon: f64) -> Result<Var> {
        let out = self.value(x).map(|v| (v + epsilon).sqrt());
        let rg = self.requires_grad(x);
        self.push("sqrt", out, rg, Op::SqrtEps(x.0))
    }

    /// Sum of all entries (fixed row-major order) as a 1x1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push("sum", Mat::from_vec(1, 1, vec![s]), rg, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Self::shape_err("mean", "empty matrix".into()));
        }
        let s = self.value(x).sum() / n as f64;
        let rg = self.requires_grad(x);
        self.push("mean", Mat::from_vec(1, 1, vec![s]), rg, Op::Mean(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push("relu", out, rg, Op::Relu(x.0))
    }

    /// PReLU with a learnable 1x1 slope shared across the whole input.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if !self.value(slope).is_scalar() {
            return Err(Self::shape_err(
                "prelu",
                format!("slope has shape {:?}", self.value(slope).shape()),
            ));
        }
        let a = self.value(slope).scalar();
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { a * v });
        let rg = self.requires_grad(x) || self.requires_grad(slope);
        self.push("prelu", out, rg, Op::Prelu { x: x.0, slope: slope.0 })
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let rg = self.requires_grad(x);
        self.push("elu", out, rg, Op::Elu(x.0))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > ZERO_ROW_EPS {
                for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push("l2_normalize_rows", out, rg, Op::L2NormalizeRows(x.0))
    }

    /// Train-mode batch normalisation per column with 1/N variance and no
    /// affine parameters.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let epsilon = BATCH_NORM_EPS;
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if r < 2 {
            return Err(Error::InvalidInput("batch_norm needs at least 2 rows".into()));
        }
        let (mean, inv_std) = column_moments(xv, epsilon);
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            for (j, (o, &v)) in out.row_mut(i).iter_mut().zip(row).enumerate() {
                *o = (v - mean[j]) * inv_std[j];
            }
        }
        let rg = self.requires_grad(x);
        self.push("batch_norm", out, rg, Op::BatchNorm { x: x.0, epsilon })
    }

    /// Elementwise `max(0, threshold - x)`.
    pub fn hinge(&mut self, x: Var, threshold: f64) -> Result<Var> {
        let out = self.value(x).map(|v| (threshold - v).max(0.0));
        let rg = self.requires_grad(x);
        self.push("hinge", out, rg, Op::Hinge { x: x.0, threshold })
    }

    /// Select rows (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidInput(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Mat::zeros(indices.len(), c);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(xv.row(i));
        }
        let rg = self.requires_grad(x);
        self.push("gather_rows", out, rg, Op::GatherRows { x: x.0, indices: indices.to_vec() })
    }

    /// `x + bias` with `bias` a 1xD row broadcast over all rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != c {
            return Err(Self::shape_err("add_bias", format!("bias {br}x{bc} for {c} columns")));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let (r, _) = xv.shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            for (j, (o, &v)) in out.row_mut(i).iter_mut().zip(xv.row(i)).enumerate() {
                *o = v + bv.get(0, j);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push("add_bias", out, rg, Op::AddBias { x: x.0, bias: bias.0 })
    }

    /// Subtract the column mean from every column.
    pub fn col_center(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if r == 0 {
            return Err(Self::shape_err("col_center", "empty matrix".into()));
        }
        let means = column_means(xv);
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            for (j, (o, &v)) in out.row_mut(i).iter_mut().zip(xv.row(i)).enumerate() {
                *o = v - means[j];
            }
        }
        let rg = self.requires_grad(x);
        self.push("col_center", out, rg, Op::ColCenter(x.0))
    }

    /// Diagonal of a square matrix as an n x 1 column.
    pub fn diag_part(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if r != c {
            return Err(Self::shape_err("diag_part", format!("{r}x{c} not square")));
        }
        let data = (0..r).map(|i| self.value(x).get(i, i)).collect();
        let rg = self.requires_grad(x);
        self.push("diag_part", Mat::from_vec(r, 1, data), rg, Op::DiagPart(x.0))
    }

    /// Copy with the main diagonal zeroed.
    pub fn zero_diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if r != c {
            return Err(Self::shape_err("zero_diag", format!("{r}x{c} not square")));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            out.set(i, i, 0.0);
        }
        let rg = self.requires_grad(x);
        self.push("zero_diag", out, rg, Op::ZeroDiag(x.0))
    }

    /// All-pairs squared Euclidean distances between rows.
    pub fn pairwise_sqdist(&mut self, x: Var) -> Result<Var> {
        let out = dense::pairwise_sqdist(self.value(x));
        let rg = self.requires_grad(x);
        self.push("pairwise_sqdist", out, rg, Op::PairwiseSqdist(x.0))
    }

    /// Pack 1x1 values into a single 1xN row.
    pub fn concat_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_scalars", "empty input list".into()));
        }
        let mut data = Vec::with_capacity(xs.len());
        let mut rg = false;
        for &v in xs {
            if !self.value(v).is_scalar() {
                return Err(Self::shape_err(
                    "concat_scalars",
                    format!("operand has shape {:?}", self.value(v).shape()),
                ));
            }
            data.push(self.value(v).scalar());
            rg |= self.requires_grad(v);
        }
        self.push(
            "concat_scalars",
            Mat::from_vec(1, xs.len(), data),
            rg,
            Op::ConcatScalars(xs.iter().map(|v| v.0).collect()),
        )
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_cols", "empty input list".into()));
        }
        let rows = self.value(xs[0]).rows();
        let mut total_cols = 0;
        let mut rg = false;
        for &v in xs {
            if self.value(v).rows() != rows {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", rows, self.value(v).rows()),
                ));
            }
            total_cols += self.value(v).cols();
            rg |= self.requires_grad(v);
        }
        let mut out = Mat::zeros(rows, total_cols);
        for i in 0..rows {
            let mut offset = 0;
            for &v in xs {
                let part = self.value(v);
                out.row_mut(i)[offset..offset + part.cols()].copy_from_slice(part.row(i));
                offset += part.cols();
            }
        }
        self.push(
            "concat_cols",
            out,
            rg,
            Op::ConcatCols(xs.iter().map(|v| v.0).collect()),
        )
    }

    /// Single entry as a 1x1 value.
    pub fn entry(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if row >= r || col >= c {
            return Err(Self::shape_err("entry", format!("({row},{col}) of {r}x{c}")));
        }
        let v = self.value(x).get(row, col);
        let rg = self.requires_grad(x);
        self.push("entry", Mat::from_vec(1, 1, vec![v]), rg, Op::Entry { x: x.0, row, col })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Repeated calls recompute the
    /// same gradients from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else { continue };
            self.propagate(idx, &grad);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: Mat) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Mat) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    // dA = g * B^T
                    let bv = &self.nodes[b].value;
                    let mut da = Mat::zeros(grad.rows(), bv.rows());
                    dense::gram_into(&mut da, grad, bv);
                    self.accumulate(a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T * g
                    let at = self.nodes[a].value.transpose();
                    let mut db = Mat::zeros(at.rows(), grad.cols());
                    dense::matmul_into(&mut db, &at, grad);
                    self.accumulate(b, db);
                }
            }
            Op::SparseDense { operand, rhs } => {
                let rhs = *rhs;
                if self.nodes[rhs].requires_grad {
                    let db = operand.transposed.matmul_dense(grad);
                    self.accumulate(rhs, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone());
                let mut neg = grad.clone();
                neg.scale(-1.0);
                self.accumulate(b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let mut da = grad.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
                        *d *= v;
                    }
                    self.accumulate(a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = grad.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                        *d *= v;
                    }
                    self.accumulate(b, db);
                }
            }
            Op::ScalarMul(x, factor) => {
                let (x, factor) = (*x, *factor);
                let mut dx = grad.clone();
                dx.scale(factor);
                self.accumulate(x, dx);
            }
            Op::ScalarTensorMul { scalar, mat } => {
                let (scalar, mat) = (*scalar, *mat);
                if self.nodes[scalar].requires_grad {
                    let mut acc = 0.0;
                    for (g, v) in grad.data().iter().zip(self.nodes[mat].value.data()) {
                        acc += g * v;
                    }
                    self.accumulate(scalar, Mat::from_vec(1, 1, vec![acc]));
                }
                if self.nodes[mat].requires_grad {
                    let s = self.nodes[scalar].value.scalar();
                    let mut dm = grad.clone();
                    dm.scale(s);
                    self.accumulate(mat, dm);
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                self.accumulate(x, grad.transpose());
            }
            Op::RowSoftmax { x, temperature } => {
                let (x, temperature) = (*x, *temperature);
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = grad.row(i);
                    let mut dot = 0.0;
                    for (&g, &v) in gr.iter().zip(yr) {
                        dot += g * v;
                    }
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Exp(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                    *d *= v;
                }
                self.accumulate(x, dx);
            }
            Op::Log(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                    *d /= v;
                }
                self.accumulate(x, dx);
            }
            Op::Square(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                    *d *= 2.0 * v;
                }
                self.accumulate(x, dx);
            }
            Op::SqrtEps(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                    *d /= 2.0 * y;
                }
                self.accumulate(x, dx);
            }
            Op::Sum(x) => {
                let x = *x;
                let (r, c) = self.nodes[x].value.shape();
                self.accumulate(x, Mat::filled(r, c, grad.scalar()));
            }
            Op::Mean(x) => {
                let x = *x;
                let (r, c) = self.nodes[x].value.shape();
                let n = (r * c) as f64;
                self.accumulate(x, Mat::filled(r, c, grad.scalar() / n));
            }
            Op::Relu(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Prelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let a = self.nodes[slope].value.scalar();
                if self.nodes[x].requires_grad {
                    let mut dx = grad.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                        if v < 0.0 {
                            *d *= a;
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.nodes[slope].requires_grad {
                    let mut acc = 0.0;
                    for (g, &v) in grad.data().iter().zip(self.nodes[x].value.data()) {
                        if v < 0.0 {
                            acc += g * v;
                        }
                    }
                    self.accumulate(slope, Mat::from_vec(1, 1, vec![acc]));
                }
            }
            Op::Elu(x) => {
                let x = *x;
                let mut dx = grad.clone();
                let xv = self.nodes[x].value.data();
                let yv = self.nodes[idx].value.data();
                for ((d, &v), &y) in dx.data_mut().iter_mut().zip(xv).zip(yv) {
                    if v <= 0.0 {
                        *d *= y + 1.0; // d/dx (e^x - 1) = e^x = y + 1
                    }
                }
                self.accumulate(x, dx);
            }
            Op::L2NormalizeRows(x) => {
                let x = *x;
                let xv = &self.nodes[x].value;
                let yv = &self.nodes[idx].value;
                let (r, c) = xv.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= ZERO_ROW_EPS {
                        continue;
                    }
                    let yr = yv.row(i);
                    let gr = grad.row(i);
                    let mut dot = 0.0;
                    for (&g, &y) in gr.iter().zip(yr) {
                        dot += g * y;
                    }
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::BatchNorm { x, epsilon } => {
                let (x, epsilon) = (*x, *epsilon);
                let xv = &self.nodes[x].value;
                let yv = &self.nodes[idx].value;
                let (r, c) = xv.shape();
                let (_, inv_std) = column_moments(xv, epsilon);
                // column means of g and of g .* y, accumulated row-major
                let mut g_mean = vec![0.0; c];
                let mut gy_mean = vec![0.0; c];
                for i in 0..r {
                    let gr = grad.row(i);
                    let yr = yv.row(i);
                    for j in 0..c {
                        g_mean[j] += gr[j];
                        gy_mean[j] += gr[j] * yr[j];
                    }
                }
                let n = r as f64;
                for j in 0..c {
                    g_mean[j] /= n;
                    gy_mean[j] /= n;
                }
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gr = grad.row(i);
                    let yr = yv.row(i);
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv_std[j] * (gr[j] - g_mean[j] - yr[j] * gy_mean[j]);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Hinge { x, threshold } => {
                let (x, threshold) = (*x, *threshold);
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                    *d = if threshold - v > 0.0 { -*d } else { 0.0 };
                }
                self.accumulate(x, dx);
            }
            Op::GatherRows { x, indices } => {
                let x = *x;
                let indices = indices.clone();
                let (r, c) = self.nodes[x].value.shape();
                let mut dx = Mat::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    let gr = grad.row(k);
                    for (d, &g) in dx.row_mut(i).iter_mut().zip(gr) {
                        *d += g;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.accumulate(x, grad.clone());
                if self.nodes[bias].requires_grad {
                    let (r, c) = grad.shape();
                    let mut db = Mat::zeros(1, c);
                    for i in 0..r {
                        for (d, &g) in db.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *d += g;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::ColCenter(x) => {
                let x = *x;
                let (r, c) = grad.shape();
                let means = column_means(grad);
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    for (j, (d, &g)) in dx.row_mut(i).iter_mut().zip(grad.row(i)).enumerate() {
                        *d = g - means[j];
                    }
                }
                self.accumulate(x, dx);
            }
            Op::DiagPart(x) => {
                let x = *x;
                let n = self.nodes[x].value.rows();
                let mut dx = Mat::zeros(n, n);
                for i in 0..n {
                    dx.set(i, i, grad.get(i, 0));
                }
                self.accumulate(x, dx);
            }
            Op::ZeroDiag(x) => {
                let x = *x;
                let mut dx = grad.clone();
                for i in 0..dx.rows() {
                    dx.set(i, i, 0.0);
                }
                self.accumulate(x, dx);
            }
            Op::PairwiseSqdist(x) => {
                let x = *x;
                let xv = &self.nodes[x].value;
                let n = xv.rows();
                // dx_i = 2 * sum_j (g_ij + g_ji) (x_i - x_j)
                let mut w = Mat::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        w.set(i, j, grad.get(i, j) + grad.get(j, i));
                    }
                }
                let row_sums: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
                let mut wx = Mat::zeros(n, xv.cols());
                dense::matmul_into(&mut wx, &w, xv);
                let mut dx = Mat::zeros(n, xv.cols());
                for i in 0..n {
                    let xi = xv.row(i);
                    let wxi = wx.row(i);
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = 2.0 * (row_sums[i] * xi[j] - wxi[j]);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::ConcatScalars(parts) => {
                let parts = parts.clone();
                for (k, p) in parts.into_iter().enumerate() {
                    let g = grad.get(0, k);
                    self.accumulate(p, Mat::from_vec(1, 1, vec![g]));
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = grad.rows();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.nodes[p].value.shape();
                    debug_assert_eq!(pr, rows);
                    let mut dp = Mat::zeros(pr, pc);
                    for i in 0..rows {
                        dp.row_mut(i).copy_from_slice(&grad.row(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    self.accumulate(p, dp);
                }
            }
            Op::Entry { x, row, col } => {
                let (x, row, col) = (*x, *row, *col);
                let (r, c) = self.nodes[x].value.shape();
                let mut dx = Mat::zeros(r, c);
                dx.set(row, col, grad.scalar());
                self.accumulate(x, dx);
            }
        }
    }
}

fn column_means(m: &Mat) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut means = vec![0.0; c];
    for i in 0..r {
        for (acc, &v) in means.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    for acc in &mut means {
        *acc /= r as f64;
    }
    means
}

/// Column means and `1/sqrt(var + eps)` with 1/N variance.
fn column_moments(m: &Mat, epsilon: f64) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = m.shape();
    let means = column_means(m);
    let mut vars = vec![0.0; c];
    for i in 0..r {
        for (j, &v) in m.row(i).iter().enumerate() {
            let d = v - means[j];
            vars[j] += d * d;
        }
    }
    let inv_std = vars
        .iter()
        .map(|&v| 1.0 / (v / r as f64 + epsilon).sqrt())
        .collect();
    (means, inv_std)
}

/// Compare analytic gradients (from `grad_fn`, expected to run
/// [`Tape::backward`]) against central finite differences of `loss_fn`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<L, G>(
    mut loss_fn: L,
    mut grad_fn: G,
    params: &mut [Mat],
    eps: f64,
) -> Result<f64>
where
    L: FnMut(&[Mat]) -> Result<f64>,
    G: FnMut(&[Mat]) -> Result<Vec<Mat>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput("finite_diff_check eps must be positive".into()));
    }
    let analytic = grad_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "grad_fn returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(Error::InvalidInput(format!(
                "gradient {p} has shape {:?}, parameter has {:?}",
                analytic[p].shape(),
                params[p].shape()
            )));
        }
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            params[p].data_mut()[k] = orig + eps;
            let up = loss_fn(params)?;
            params[p].data_mut()[k] = orig - eps;
            let down = loss_fn(params)?;
            params[p].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_check" });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity_forward() {
        let mut tape = Tape::new();
        let a = tape.parameter(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Mat::identity(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn row_softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_rows(&[vec![0.0, 0.0]]));
        let y = tape.row_softmax(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn batch_norm_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_rows(&[vec![1.0], vec![3.0]]));
        let y = tape.batch_norm(x).unwrap();
        // 1/N variance: mean 2, var 1; epsilon shrinks slightly below 1.
        let v = tape.value(y);
        assert!((v.get(0, 0) + 1.0).abs() < 1e-5);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-5);
        let mean = (v.get(0, 0) + v.get(1, 0)) / 2.0;
        assert!(mean.abs() < 1e-12);
        let var = (v.get(0, 0) - mean).powi(2) + (v.get(1, 0) - mean).powi(2);
        let expected = 1.0 / (1.0 + BATCH_NORM_EPS);
        assert!((var / 2.0 - expected).abs() < 1e-9);
    }

    #[test]
    fn simple_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(Mat::from_vec(1, 1, vec![3.0]));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar(), 6.0);
        // second backward call reads the same value
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_ancestors() {
        // d/dx [sg(x) * x] at x=3 must be 3: only the live factor counts.
        let mut tape = Tape::new();
        let x = tape.parameter(Mat::from_vec(1, 1, vec![3.0]));
        let frozen = tape.stop_gradient(x);
        let y = tape.elementwise_mul(frozen, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar(), 3.0);
        assert_eq!(tape.value(frozen).scalar(), 3.0);
    }

    #[test]
    fn stop_gradient_only_path_gives_no_grad() {
        let mut tape = Tape::new();
        let x = tape.parameter(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let frozen = tape.stop_gradient(x);
        let loss = tape.sum(frozen).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn sum_of_matmul_gradient_matches_formula() {
        // loss = sum(A B): grad_A = ones * B^T
        let mut rng = crate::rng::seeded(42, "test", 0);
        let mut tape = Tape::new();
        let a_val = rand_mat(3, 4, &mut rng);
        let b_val = rand_mat(4, 2, &mut rng);
        let a = tape.parameter(a_val.clone());
        let b = tape.constant(b_val.clone());
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(a).unwrap();
        let ones = Mat::filled(3, 2, 1.0);
        let want = ones.matmul(&b_val.transpose()).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn nonfinite_forward_is_trapped() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_vec(1, 1, vec![-1.0]));
        assert!(matches!(tape.log(x).and_then(|l| tape.sum(l)), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sparse_dense_matches_dense_matmul() {
        let mut rng = crate::rng::seeded(7, "test", 1);
        let dense = rand_mat(5, 4, &mut rng).map(|v| if v.abs() < 0.5 { 0.0 } else { v });
        let csr = SparseOperand::new(CsrMatrix::from_dense(&dense));
        let w_val = rand_mat(4, 3, &mut rng);

        let mut tape = Tape::new();
        let w1 = tape.parameter(w_val.clone());
        let y1 = tape.sparse_dense_matmul(&csr, w1).unwrap();
        let l1 = tape.sum(y1).unwrap();
        tape.backward(l1).unwrap();
        let g_sparse = tape.grad(w1).unwrap().clone();
        let y1_val = tape.value(y1).clone();

        let mut tape2 = Tape::new();
        let d = tape2.constant(dense);
        let w2 = tape2.parameter(w_val);
        let y2 = tape2.matmul(d, w2).unwrap();
        let l2 = tape2.sum(y2).unwrap();
        tape2.backward(l2).unwrap();
        let g_dense = tape2.grad(w2).unwrap();

        for (a, b) in y1_val.data().iter().zip(tape2.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g_sparse.data().iter().zip(g_dense.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Every primitive with a smooth region passes a finite-difference check
    /// on a random instance.
    #[test]
    fn primitives_pass_finite_difference() {
        type Builder = fn(&mut Tape, Var) -> Result<Var>;
        let cases: Vec<(&str, usize, usize, Builder)> = vec![
            ("exp", 3, 4, |t, x| t.exp(x)),
            ("square", 3, 4, |t, x| t.square(x)),
            ("sqrt_eps", 3, 4, |t, x| {
                let s = t.square(x)?; // keep the argument positive
                t.sqrt_eps(s, 1e-4)
            }),
            ("mean", 3, 4, |t, x| t.mean(x)),
            ("relu", 3, 4, |t, x| t.relu(x)),
            ("elu", 3, 4, |t, x| t.elu(x)),
            ("hinge", 3, 4, |t, x| t.hinge(x, 1.0)),
            ("row_softmax", 3, 4, |t, x| t.row_softmax(x, 0.5)),
            ("l2_normalize_rows", 3, 4, |t, x| t.l2_normalize_rows(x)),
            ("batch_norm", 5, 3, |t, x| t.batch_norm(x)),
            ("col_center", 5, 3, |t, x| t.col_center(x)),
            ("pairwise_sqdist", 4, 3, |t, x| t.pairwise_sqdist(x)),
            ("transpose", 3, 4, |t, x| t.transpose(x)),
            ("zero_diag", 4, 4, |t, x| t.zero_diag(x)),
            ("diag_part", 4, 4, |t, x| t.diag_part(x)),
            ("gather_rows", 4, 3, |t, x| t.gather_rows(x, &[0, 2, 2, 1])),
            ("log", 3, 4, |t, x| {
                let s = t.square(x)?;
                let shifted = t.scalar_mul(s, 1.0)?;
                let one = t.constant(Mat::filled(3, 4, 1.0));
                let pos = t.add(shifted, one)?;
                t.log(pos)
            }),
        ];
        let mut rng = crate::rng::seeded(11, "fd", 0);
        for (name, r, c, build) in cases {
            let mut params = vec![rand_mat(r, c, &mut rng)];
            // random reduction weights: structured ones can engineer exact-zero
            // gradient coordinates, where the relative-error denominator
            // degenerates to numeric noise
            let w_seed = rand_mat(16, 16, &mut rng);
            let run = |ps: &[Mat]| -> Result<(f64, Vec<Mat>, bool)> {
                let mut tape = Tape::new();
                let x = tape.parameter(ps[0].clone());
                let y = build(&mut tape, x)?;
                let (yr, yc) = tape.value(y).shape();
                let weights = tape.constant(Mat::from_vec(
                    yr,
                    yc,
                    (0..yr * yc).map(|k| 0.5 + w_seed.data()[k % 256]).collect(),
                ));
                let weighted = tape.elementwise_mul(y, weights)?;
                let loss = tape.sum(weighted)?;
                tape.backward(loss)?;
                let g = tape.grad(x).cloned().unwrap_or_else(|| Mat::zeros(r, c));
                Ok((tape.value(loss).scalar(), vec![g], true))
            };
            let err = finite_diff_check(
                |ps| run(ps).map(|(v, _, _)| v),
                |ps| run(ps).map(|(_, g, _)| g),
                &mut params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: finite-diff error {err}");
        }
    }

    #[test]
    fn prelu_gradients_including_slope() {
        let mut rng = crate::rng::seeded(13, "prelu", 0);
        let mut params = vec![rand_mat(4, 3, &mut rng), Mat::from_vec(1, 1, vec![0.25])];
        let run = |ps: &[Mat]| -> Result<(f64, Vec<Mat>)> {
            let mut tape = Tape::new();
            let x = tape.parameter(ps[0].clone());
            let a = tape.parameter(ps[1].clone());
            let y = tape.prelu(x, a)?;
            let loss = tape.sum(y)?;
            tape.backward(loss)?;
            Ok((
                tape.value(loss).scalar(),
                vec![tape.grad(x).unwrap().clone(), tape.grad(a).unwrap().clone()],
            ))
        };
        let err = finite_diff_check(
            |ps| run(ps).map(|(v, _)| v),
            |ps| run(ps).map(|(_, g)| g),
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "prelu finite-diff error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = vec![Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])];
        let err = finite_diff_check(
            |_| Ok(5.0),
            |_| Ok(vec![Mat::zeros(2, 2)]),
            &mut params,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.parameter(Mat::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }
}
