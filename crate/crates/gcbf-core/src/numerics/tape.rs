//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Tape` records a fixed, closed set of primitives while evaluating them
//! eagerly. `backward` replays the recording in exact reverse order and
//! accumulates vector-Jacobian products. The primitive set is just large
//! enough for the GNN certificate/policy and the training losses:
//! matmul, add/sub, elementwise mul, scalar mul, relu (also the hinge
//! `[.]^+`), tanh, exp, log, sum/max reductions, softmax over an axis,
//! concatenate, slice, and the Euclidean norm. `add` and `mul` come with
//! row/column broadcast variants (bias rows, per-row attention weights), and
//! the reductions exist in whole-tensor and per-axis forms.
//!
//! Every op checks shapes and that its output is finite, so a NaN or Inf is
//! reported at the op that produced it instead of corrupting downstream
//! state.

use std::ops::Range;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameter or probe point).
    Input,
    /// Non-differentiable data.
    Constant,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    /// `[r,c] + [1,c]`, broadcast over rows (bias add).
    AddRow(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// `[r,c] * [r,1]`, broadcast over columns (attention weighting).
    MulCol(VarId, VarId),
    ScalarMul(VarId, f64),
    Relu(VarId),
    Tanh(VarId),
    Exp(VarId),
    Log(VarId),
    SumAll(VarId),
    /// Sum over one axis, keeping the reduced axis with size 1.
    SumAxis(VarId, usize),
    MaxAll(VarId),
    /// Softmax along `axis`; rows (axis=1) or columns (axis=0) each sum to 1.
    Softmax(VarId, usize),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    SliceRows(VarId, Range<usize>),
    SliceCols(VarId, Range<usize>),
    Norm2(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when a gradient can flow into this node.
    requires_grad: bool,
}

/// Recording of a forward computation, with values stored per node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded scalar w.r.t. `id`; zeros if the variable did
    /// not participate in the computation.
    pub fn get(&self, tape: &Tape, id: VarId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.nodes[id.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Like [`Gradients::get`] but leaves `None` alone, avoiding a copy.
    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record a differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<VarId, NumericsError> {
        self.push("input", Op::Input, value, true)
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId, NumericsError> {
        self.push("constant", Op::Constant, value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        value: Tensor,
        requires_grad: bool,
    ) -> Result<VarId, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value, requires_grad });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", Op::MatMul(a, b), v, rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("add", Op::Add(a, b), v, rg)
    }

    /// `a + row` with `row` shaped `[1, cols(a)]`, broadcast over rows.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % cols])
            .collect();
        let v = Tensor::new(ta.rows(), cols, data)?;
        let rg = self.requires(a) || self.requires(row);
        self.push("add_row", Op::AddRow(a, row), v, rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("sub", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("sub", Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("mul", Op::Mul(a, b), v, rg)
    }

    /// `a * col` with `col` shaped `[rows(a), 1]`, broadcast over columns.
    pub fn mul_col(&mut self, a: VarId, col: VarId) -> Result<VarId, NumericsError> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tc.data()[i / cols])
            .collect();
        let v = Tensor::new(ta.rows(), cols, data)?;
        let rg = self.requires(a) || self.requires(col);
        self.push("mul_col", Op::MulCol(a, col), v, rg)
    }

    pub fn scalar_mul(&mut self, a: VarId, s: f64) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a);
        self.push("scalar_mul", Op::ScalarMul(a, s), v, rg)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a);
        self.push("relu", Op::Relu(a), v, rg)
    }

    /// The positive-part hinge `[x]^+`; same kernel as relu.
    pub fn hinge(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a);
        self.push("tanh", Op::Tanh(a), v, rg)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a);
        self.push("exp", Op::Exp(a), v, rg)
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a);
        self.push("log", Op::Log(a), v, rg)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let total = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push("sum", Op::SumAll(a), Tensor::scalar(total), rg)
    }

    /// Sum over `axis` (0 = down columns, 1 = across rows), keepdim.
    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let (r, c) = ta.shape();
        let v = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(ta.row_slice(i)) {
                        *o += x;
                    }
                }
                Tensor::new(1, c, out)?
            }
            1 => {
                let out = (0..r).map(|i| ta.row_slice(i).iter().sum()).collect();
                Tensor::new(r, 1, out)?
            }
            _ => return Err(NumericsError::ShapeMismatch { op: "sum_axis", detail: format!("axis {axis}") }),
        };
        let rg = self.requires(a);
        self.push("sum_axis", Op::SumAxis(a, axis), v, rg)
    }

    /// Maximum over all entries; gradient flows to the first maximizer.
    pub fn max_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let m = self
            .value(a)
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let rg = self.requires(a);
        self.push("max", Op::MaxAll(a), Tensor::scalar(m), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        let (r, c) = ta.shape();
        if axis > 1 {
            return Err(NumericsError::ShapeMismatch { op: "softmax", detail: format!("axis {axis}") });
        }
        let mut out = ta.data().to_vec();
        let (lanes, lane_len, stride, step) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for lane in 0..lanes {
            let base = lane * stride;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..lane_len {
                mx = mx.max(out[base + k * step]);
            }
            let mut total = 0.0;
            for k in 0..lane_len {
                let e = (out[base + k * step] - mx).exp();
                out[base + k * step] = e;
                total += e;
            }
            for k in 0..lane_len {
                out[base + k * step] /= total;
            }
        }
        let v = Tensor::new(r, c, out)?;
        let rg = self.requires(a);
        self.push("softmax", Op::Softmax(a, axis), v, rg)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "concat_rows", detail: "no inputs".into() });
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("cols {} vs {}", tp.cols(), c),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let v = Tensor::new(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "concat_cols", detail: "no inputs".into() });
        }
        let r = self.value(parts[0]).rows();
        let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total_c];
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("rows {} vs {}", tp.rows(), r),
                });
            }
            for i in 0..r {
                let src = tp.row_slice(i);
                data[i * total_c + offset..i * total_c + offset + src.len()].copy_from_slice(src);
            }
            offset += tp.cols();
        }
        let v = Tensor::new(r, total_c, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), v, rg)
    }

    pub fn slice_rows(&mut self, a: VarId, range: Range<usize>) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        if range.end > ta.rows() || range.start > range.end {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{range:?} of {} rows", ta.rows()),
            });
        }
        let c = ta.cols();
        let data = ta.data()[range.start * c..range.end * c].to_vec();
        let v = Tensor::new(range.end - range.start, c, data)?;
        let rg = self.requires(a);
        self.push("slice_rows", Op::SliceRows(a, range), v, rg)
    }

    pub fn slice_cols(&mut self, a: VarId, range: Range<usize>) -> Result<VarId, NumericsError> {
        let ta = self.value(a);
        if range.end > ta.cols() || range.start > range.end {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{range:?} of {} cols", ta.cols()),
            });
        }
        let w = range.end - range.start;
        let mut data = Vec::with_capacity(ta.rows() * w);
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(i)[range.clone()]);
        }
        let v = Tensor::new(ta.rows(), w, data)?;
        let rg = self.requires(a);
        self.push("slice_cols", Op::SliceCols(a, range), v, rg)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn norm2(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.requires(a);
        self.push("norm2", Op::Norm2(a), Tensor::scalar(n), rg)
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output value). Gradients of non-participating variables stay zero.
    pub fn backward(&self, output: VarId, seed: Tensor) -> Result<Gradients, NumericsError> {
        if !seed.same_shape(&self.nodes[output.0].value) {
            return Err(shape_err("backward seed", &seed, &self.nodes[output.0].value));
        }
        if !seed.is_finite() {
            return Err(NumericsError::NonFinite { op: "backward seed" });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_op(idx, &g, &mut grads)?;
            // Restore so callers can also read gradients of interior nodes
            // (consumers always have higher indices, so g is complete here).
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_op(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let value = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let da = matmul_nt(g, self.value(*b))?;
                    accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let db = matmul_tn(self.value(*a), g)?;
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires(*row) {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for (i, &x) in g.data().iter().enumerate() {
                        dr[i % c] += x;
                    }
                    accumulate(grads, *row, Tensor::new(1, c, dr)?);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    let neg = g.data().iter().map(|x| -x).collect();
                    accumulate(grads, *b, Tensor::new(g.rows(), g.cols(), neg)?);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
                if self.requires(*b) {
                    let db = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.rows(), g.cols(), db)?);
                }
            }
            Op::MulCol(a, col) => {
                let cols = g.cols();
                if self.requires(*a) {
                    let cv = self.value(*col);
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * cv.data()[i / cols])
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), cols, da)?);
                }
                if self.requires(*col) {
                    let av = self.value(*a);
                    let mut dc = vec![0.0; g.rows()];
                    for (i, (&x, &y)) in g.data().iter().zip(av.data()).enumerate() {
                        dc[i / cols] += x * y;
                    }
                    accumulate(grads, *col, Tensor::col(dc));
                }
            }
            Op::ScalarMul(a, s) => {
                if self.requires(*a) {
                    let da = g.data().iter().map(|x| x * s).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
            }
            Op::Relu(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let da = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
            }
            Op::Tanh(a) => {
                if self.requires(*a) {
                    let da = g
                        .data()
                        .iter()
                        .zip(value.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
            }
            Op::Exp(a) => {
                if self.requires(*a) {
                    let da = g.data().iter().zip(value.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
            }
            Op::Log(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let da = g.data().iter().zip(av.data()).map(|(x, y)| x / y).collect();
                    accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), da)?);
                }
            }
            Op::SumAll(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let s = g.item();
                    accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), vec![s; av.len()])?);
                }
            }
            Op::SumAxis(a, axis) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let (r, c) = av.shape();
                    let da = if *axis == 0 {
                        (0..r * c).map(|i| g.data()[i % c]).collect()
                    } else {
                        (0..r * c).map(|i| g.data()[i / c]).collect()
                    };
                    accumulate(grads, *a, Tensor::new(r, c, da)?);
                }
            }
            Op::MaxAll(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let m = value.item();
                    let mut da = vec![0.0; av.len()];
                    if let Some(pos) = av.data().iter().position(|&x| x == m) {
                        da[pos] = g.item();
                    }
                    accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), da)?);
                }
            }
            Op::Softmax(a, axis) => {
                if self.requires(*a) {
                    let (r, c) = value.shape();
                    let y = value.data();
                    let mut da = vec![0.0; r * c];
                    let (lanes, lane_len, stride, step) =
                        if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    for lane in 0..lanes {
                        let base = lane * stride;
                        let mut dot = 0.0;
                        for k in 0..lane_len {
                            let i = base + k * step;
                            dot += y[i] * g.data()[i];
                        }
                        for k in 0..lane_len {
                            let i = base + k * step;
                            da[i] = y[i] * (g.data()[i] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(r, c, da)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.requires(p) {
                        let c = g.cols();
                        let dp = g.data()[start * c..(start + pr) * c].to_vec();
                        accumulate(grads, p, Tensor::new(pr, c, dp)?);
                    }
                    start += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires(p) {
                        let r = g.rows();
                        let mut dp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        accumulate(grads, p, Tensor::new(r, pc, dp)?);
                    }
                    offset += pc;
                }
            }
            Op::SliceRows(a, range) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let (r, c) = av.shape();
                    let mut da = vec![0.0; r * c];
                    da[range.start * c..range.end * c].copy_from_slice(g.data());
                    accumulate(grads, *a, Tensor::new(r, c, da)?);
                }
            }
            Op::SliceCols(a, range) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let (r, c) = av.shape();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + range.start..i * c + range.end]
                            .copy_from_slice(g.row_slice(i));
                    }
                    accumulate(grads, *a, Tensor::new(r, c, da)?);
                }
            }
            Op::Norm2(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let n = value.item().max(1e-300);
                    let s = g.item() / n;
                    let da = av.data().iter().map(|x| x * s).collect();
                    accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), da)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_gradient() {
        // f(x) = x * x at x = 3: value 9, gradient 6.
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        let g = t.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(&t, x).item(), 6.0);
    }

    #[test]
    fn softmax_singleton_is_constant() {
        let mut t = Tape::new();
        let x = t.input(Tensor::col(vec![2.5])).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).item(), 1.0);
        let y = t.sum_all(s).unwrap();
        let g = t.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(&t, x).item(), 0.0);
    }

    #[test]
    fn non_participating_gradient_is_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(1.0)).unwrap();
        let unused = t.input(Tensor::scalar(5.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(&t, unused).item(), 0.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(t.log(x), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x*x; f'(2) = 8.
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(2.0)).unwrap();
        let a = t.mul(x, x).unwrap();
        let y = t.add(a, a).unwrap();
        let g = t.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(&t, x).item(), 8.0);
    }
}
