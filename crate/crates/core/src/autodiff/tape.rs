use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::array::{matmul_into, matmul_nt_into, matmul_tn_into, DenseArray};
use crate::error::{dim_err, Error, Result};

/// Default guard added to denominators by [`Tape::safe_div`].
pub const SAFE_DIV_EPS: f64 = 1e-8;
const SAFE_DIV_ZERO: f64 = 1e-30;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    SafeDiv,
    /// `a · b`, with `b` a scalar. Identical to `Mul` with a scalar operand.
    Scale,
}

#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Array(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Array(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// A real-linear map applied independently to every row, together with its adjoint.
pub trait RowFilter: Send + Sync {
    fn row_len(&self) -> usize;
    fn apply(&self, row: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, row: &[f64], out: &mut [f64]);
}

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Binary(ElementwiseOp, Var, Var),
    ScalarRhs(ElementwiseOp, Var, f64),
    /// Every element of the array scaled by a one-element node.
    ScaleBy { scalar: Var, array: Var },
    AddBias(Var, Var),
    Activation(Activation, Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    SumRows(Var),
    NormalizeRows(Var),
    Nll { src: Var, labels: Vec<usize>, clamp: f64 },
    RowFilter(Var, Arc<dyn RowFilter>),
}

struct Node {
    value: Arc<DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter.
pub type Gradients = BTreeMap<String, DenseArray>;

/// Records a forward computation and replays it backwards once.
///
/// Nodes are appended in execution order, so the node list is always a valid
/// topological order of the DAG.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    safe_div_eps: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(z: f64) -> f64 {
    z * normal_cdf(z)
}

fn gelu_grad(z: f64) -> f64 {
    normal_cdf(z) + z * (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * FRAC_1_SQRT_2))
}

fn safe_denominator(b: f64, eps: f64) -> f64 {
    b + if b < 0.0 { -eps } else { eps }
}

fn safe_div(a: f64, b: f64, eps: f64) -> f64 {
    if a == 0.0 && b.abs() <= SAFE_DIV_ZERO {
        0.0
    } else {
        a / safe_denominator(b, eps)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_safe_div_eps(SAFE_DIV_EPS)
    }

    pub fn with_safe_div_eps(eps: f64) -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            safe_div_eps: eps,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix_dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseArray, op: Op, what: &str) -> Result<Var> {
        self.push_arc(Arc::new(value), op, what)
    }

    fn push_arc(&mut self, value: Arc<DenseArray>, op: Op, what: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        value.ensure_finite(what)?;
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddBias(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::ScaleBy { scalar, array } => self.needs(*scalar) || self.needs(*array),
            Op::ScalarRhs(_, a, _)
            | Op::Activation(_, a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::SliceCols { src: a, .. }
            | Op::GatherRows { src: a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::NormalizeRows(a)
            | Op::Nll { src: a, .. }
            | Op::RowFilter(a, _) => self.needs(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.needs(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: impl Into<Arc<DenseArray>>) -> Result<Var> {
        self.push_arc(value.into(), Op::Constant, "constant")
    }

    /// Registers a learnable leaf under `name`.
    pub fn param(&mut self, name: &str, value: impl Into<Arc<DenseArray>>) -> Result<Var> {
        self.push_arc(value.into(), Op::Param(name.to_string()), name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 {
            return Err(dim_err!("matmul {m}x{n} by {n2}x{p}"));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        self.push(DenseArray::new(vec![m, p], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        let eps = self.safe_div_eps;
        let f = move |x: f64, y: f64| match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul | ElementwiseOp::Scale => x * y,
            ElementwiseOp::SafeDiv => safe_div(x, y, eps),
        };
        match b.into() {
            Operand::Array(b) => {
                if kind == ElementwiseOp::Scale {
                    return Err(dim_err!("scale expects a scalar operand"));
                }
                let out = self.value(a).zip_map(self.value(b), f)?;
                self.push(out, Op::Binary(kind, a, b), "elementwise")
            }
            Operand::Scalar(s) => {
                let out = self.value(a).map(|x| f(x, s));
                self.push(out, Op::ScalarRhs(kind, a, s), "elementwise")
            }
        }
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    /// `a / (b + ε·sign(b))`, and exactly zero where `a = 0` and `|b| ≤ 1e-30`.
    pub fn safe_div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(ElementwiseOp::SafeDiv, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Scale, a, s)
    }

    /// Multiplies every element of `array` by the one-element node `scalar`.
    pub fn scale_by(&mut self, scalar: Var, array: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(dim_err!("scale_by expects a one-element scale, got {:?}", self.shape(scalar)));
        }
        let s = self.value(scalar).item();
        let out = self.value(array).map(|x| s * x);
        self.push(out, Op::ScaleBy { scalar, array }, "scale_by")
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(dim_err!("bias of {} for rows of {n}", self.value(bias).len()));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for i in 0..m {
            for (o, bj) in out.row_mut(i).iter_mut().zip(b) {
                *o += bj;
            }
        }
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let out = match kind {
            Activation::Gelu => self.value(a).map(gelu),
            Activation::Relu => self.value(a).map(|z| z.max(0.0)),
        };
        self.push(out, Op::Activation(kind, a), "activation")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Relu, a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
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
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(dim_err!("column slice {start}..{} of {n}", start + len));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(DenseArray::new(vec![m, len], out)?, Op::SliceCols { src: a, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(*parts.first().ok_or_else(|| dim_err!("empty concat"))?).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(dim_err!("concat_cols row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(DenseArray::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(*parts.first().ok_or_else(|| dim_err!("empty concat"))?).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(dim_err!("concat_rows column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        self.push(DenseArray::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Builds a matrix whose `i`-th row is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if index.is_empty() {
            return Err(dim_err!("empty gather"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(dim_err!("row {i} out of {m}"));
            }
            out.extend_from_slice(src.row(i));
        }
        self.push(
            DenseArray::new(vec![index.len(), n], out)?,
            Op::GatherRows {
                src: a,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(DenseArray::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums of an `m×n` matrix as an `m×1` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let m = src.rows();
        let out: Vec<f64> = (0..m).map(|i| src.row(i).iter().sum()).collect();
        self.push(DenseArray::new(vec![m, 1], out)?, Op::SumRows(a), "sum_rows")
    }

    /// Scales every row to unit Euclidean norm. A zero row is a hard error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite("normalize_rows of a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(out, Op::NormalizeRows(a), "normalize_rows")
    }

    /// Mean negative log-probability of the labelled entries of a `B×C`
    /// probability matrix, with probabilities clamped from below at `clamp`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], clamp: f64) -> Result<Var> {
        let (b, c) = self.dims(probs);
        if labels.len() != b {
            return Err(dim_err!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.value(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p.get(i, l).max(clamp).ln())
            .sum();
        self.push(
            DenseArray::scalar(total / b as f64),
            Op::Nll {
                src: probs,
                labels: labels.to_vec(),
                clamp,
            },
            "nll",
        )
    }

    /// Applies a real-linear row filter; its adjoint is used on the way back.
    pub fn row_filter(&mut self, a: Var, filter: Arc<dyn RowFilter>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if filter.row_len() != n {
            return Err(dim_err!("filter of length {} for rows of {n}", filter.row_len()));
        }
        let src = self.value(a);
        let mut out = DenseArray::zeros(&[m, n]);
        for i in 0..m {
            filter.apply(src.row(i), out.row_mut(i));
        }
        self.push(out, Op::RowFilter(a, filter), "row_filter")
    }

    /// Reverse sweep from a one-element `loss` node.
    ///
    /// Returns one gradient per registered parameter (zeros for parameters the
    /// loss does not depend on). The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a single value, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = self.nodes[idx].op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| DenseArray::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], target: Var, contrib: DenseArray) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&contrib),
            slot @ None => {
                let shape = self.shape(target).to_vec();
                *slot = Some(contrib.reshape(shape).expect("adjoint size matches"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let node = &self.nodes[idx];
        let eps = self.safe_div_eps;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.dims(*a);
                let p = self.dims(*b).1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * n];
                    matmul_nt_into(g.data(), self.value(*b).data(), &mut ga, m, p, n);
                    self.accumulate(grads, *a, DenseArray::new(vec![m, n], ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * p];
                    matmul_tn_into(self.value(*a).data(), g.data(), &mut gb, m, n, p);
                    self.accumulate(grads, *b, DenseArray::new(vec![n, p], gb)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ga, gb) = match kind {
                    ElementwiseOp::Add => (g.clone(), g.clone()),
                    ElementwiseOp::Sub => (g.clone(), g.map(|x| -x)),
                    ElementwiseOp::Mul | ElementwiseOp::Scale => {
                        (g.zip_map(bv, |gi, y| gi * y)?, g.zip_map(av, |gi, x| gi * x)?)
                    }
                    ElementwiseOp::SafeDiv => {
                        let ga = g.zip_map(bv, |gi, y| gi / safe_denominator(y, eps))?;
                        let mut gb = g.clone();
                        for ((o, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            let den = safe_denominator(y, eps);
                            *o = if x == 0.0 { 0.0 } else { -*o * x / (den * den) };
                        }
                        (ga, gb)
                    }
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ScalarRhs(kind, a, s) => {
                let ga = match kind {
                    ElementwiseOp::Add | ElementwiseOp::Sub => g.clone(),
                    ElementwiseOp::Mul | ElementwiseOp::Scale => g.map(|x| x * s),
                    ElementwiseOp::SafeDiv => {
                        let den = safe_denominator(*s, eps);
                        g.map(|x| x / den)
                    }
                };
                self.accumulate(grads, *a, ga);
            }
            Op::ScaleBy { scalar, array } => {
                let s = self.value(*scalar).item();
                if self.needs(*scalar) {
                    let dot: f64 = g.data().iter().zip(self.value(*array).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *scalar, DenseArray::scalar(dot));
                }
                self.accumulate(grads, *array, g.map(|x| x * s));
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let (m, n) = g.as_matrix_dims();
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for (o, v) in gb.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, DenseArray::vector(gb)?);
                }
            }
            Op::Activation(kind, a) => {
                let ga = match kind {
                    Activation::Gelu => g.zip_map(self.value(*a), |gi, z| gi * gelu_grad(z))?,
                    Activation::Relu => g.zip_map(self.value(*a), |gi, z| if z > 0.0 { gi } else { 0.0 })?,
                };
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(x, y)| x * y).sum();
                    for (o, &yj) in ga.row_mut(i).iter_mut().zip(yr) {
                        *o = yj * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::SliceCols { src, start } => {
                let (m, n) = self.dims(*src);
                let len = g.cols();
                let mut ga = DenseArray::zeros(&[m, n]);
                for i in 0..m {
                    ga.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *src, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = self.dims(p);
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for i in 0..m {
                            gp.extend_from_slice(&g.row(i)[offset..offset + n]);
                        }
                        self.accumulate(grads, p, DenseArray::new(vec![m, n], gp)?);
                    }
                    offset += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let gp = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, DenseArray::new(self.shape(p).to_vec(), gp)?);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { src, index } => {
                let (m, n) = self.dims(*src);
                let mut ga = DenseArray::zeros(&[m, n]);
                for (i, &r) in index.iter().enumerate() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *src, ga);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, DenseArray::full(self.shape(*a), s));
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a);
                let ga = DenseArray::from_fn(&[m, n], |i| g.data()[i / n]);
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let y = &node.value;
                let x = self.value(*a);
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(p, q)| p * q).sum();
                    for (o, &yj) in ga.row_mut(i).iter_mut().zip(yr) {
                        *o = (*o - yj * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Nll { src, labels, clamp } => {
                let p = self.value(*src);
                let b = labels.len() as f64;
                let upstream = g.item();
                let mut ga = DenseArray::zeros(p.shape());
                let c = p.cols();
                for (i, &l) in labels.iter().enumerate() {
                    let pi = p.get(i, l);
                    if pi > *clamp {
                        ga.data_mut()[i * c + l] = -upstream / (b * pi);
                    }
                }
                self.accumulate(grads, *src, ga);
            }
            Op::RowFilter(a, filter) => {
                let (m, n) = self.dims(*a);
                let mut ga = DenseArray::zeros(&[m, n]);
                for i in 0..m {
                    filter.apply_adjoint(g.row(i), ga.row_mut(i));
                }
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}
