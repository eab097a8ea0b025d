//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a
//! linear list. [`Tape::backward`] replays that list in reverse, producing a
//! gradient for every node that depends on a leaf created with
//! [`Tape::leaf`]. A tape is built per training step and dropped afterwards;
//! there is no graph reuse and no higher-order differentiation.
//!
//! Every operation checks its inputs' shapes and rejects non-finite outputs,
//! so a NaN never silently propagates into a loss.

use crate::error::{Error, Result};

use super::tensor::{matmul_into, Tensor};
use super::NORM_EPS;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Softmax direction for [`Tape::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row is normalized independently.
    Rows,
    /// Each column is normalized independently.
    Cols,
}

const RMS_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Recip(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    RmsNorm {
        x: Var,
        inv_rms: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ReplaceRows {
        base: Var,
        rows: Var,
        idx: Vec<usize>,
    },
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    PairSoftmax {
        logits: Var,
        pos: usize,
        neg: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, taking ownership; zero-filled if absent.
    pub fn take(&mut self, var: Var, rows: usize, cols: usize) -> Tensor {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a (r×c) + bias (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + bias {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Scales row `i` of `a (r×c)` by `s[i]` where `s` is `r×1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.cols() != 1 || ts.rows() != ta.rows() {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} by {:?}", ta.shape(), ts.shape()),
            ));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let f = ts.data()[r];
            out.row_slice_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push("scale_rows", out, Op::ScaleRows(a, s), &[a, s])
    }

    /// Multiplies every element of `a` by the `1×1` tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(Error::dim("scale_by", format!("scalar has shape {:?}", self.shape(s))));
        }
        let f = self.value(s).item();
        let out = self.value(a).scale(f);
        self.push("scale_by", out, Op::ScaleBy(a, s), &[a, s])
    }

    /// `a · mul + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * mul + add);
        self.push("affine", out, Op::Affine(a, mul), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(super::functional::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push("recip", out, Op::Recip(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        match axis {
            Axis::Rows => {
                let mut out = self.value(a).clone();
                for r in 0..out.rows() {
                    super::functional::softmax_in_place(out.row_slice_mut(r));
                }
                self.push("softmax", out, Op::Softmax(a), &[a])
            }
            Axis::Cols => {
                let t = self.transpose(a)?;
                let s = self.softmax(t, Axis::Rows)?;
                self.transpose(s)
            }
        }
    }

    /// Row softmax over the lower triangle (column `j ≤ i` for row `i`);
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() > ta.cols() {
            return Err(Error::dim("causal_softmax", format!("{:?}", ta.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            super::functional::softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        self.push("causal_softmax", out, Op::CausalSoftmax(a), &[a])
    }

    /// Mean over rows of `-ln softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() || tl.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), tl.rows()),
            ));
        }
        let mut probs = tl.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= tl.cols() {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: t,
                    len: tl.cols(),
                });
            }
            total -= super::functional::log_softmax_at(tl.row_slice(r), t);
            super::functional::softmax_in_place(probs.row_slice_mut(r));
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", out, op, &[logits])
    }

    /// Pairwise cosine similarities between rows: `out[i][j] = cos(a_i, b_j)`
    /// with the `ε`-guarded denominator `‖a_i‖‖b_j‖ + ε`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::dim(
                "cosine",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let norms_a: Vec<f64> = ta.iter_rows().map(super::functional::norm).collect();
        let norms_b: Vec<f64> = tb.iter_rows().map(super::functional::norm).collect();
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for (i, ra) in ta.iter_rows().enumerate() {
            for (j, rb) in tb.iter_rows().enumerate() {
                let dot = super::functional::dot(ra, rb);
                out.set(i, j, dot / (norms_a[i] * norms_b[j] + NORM_EPS));
            }
        }
        let op = Op::Cosine {
            a,
            b,
            norms_a,
            norms_b,
        };
        self.push("cosine", out, op, &[a, b])
    }

    /// Divides every row by its root-mean-square.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols().max(1) as f64;
        let mut inv_rms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        self.push("rms_norm", out, Op::RmsNorm { x, inv_rms }, &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let out = Tensor::new(ta.rows(), cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let cols = self.shape(*first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{} columns vs {cols}", t.cols()),
                ));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            if i >= ta.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: i,
                    len: ta.rows(),
                });
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::new(idx.len(), ta.cols(), data)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Copy of `base` with row `idx[t]` replaced by row `t` of `rows`.
    /// Indices must be distinct.
    pub fn replace_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        if tr.rows() != idx.len() || tr.cols() != tb.cols() {
            return Err(Error::dim(
                "replace_rows",
                format!("{:?} into {:?} at {} indices", tr.shape(), tb.shape(), idx.len()),
            ));
        }
        let mut seen = vec![false; tb.rows()];
        let mut out = tb.clone();
        for (t, &i) in idx.iter().enumerate() {
            if i >= tb.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: i,
                    len: tb.rows(),
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("replace_rows: duplicate index {i}")));
            }
            out.row_slice_mut(i).copy_from_slice(tr.row_slice(t));
        }
        let op = Op::ReplaceRows {
            base,
            rows,
            idx: idx.to_vec(),
        };
        self.push("replace_rows", out, op, &[base, rows])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {} columns", ta.cols()),
            ));
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let out = Tensor::new(ta.rows(), end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Two-way softmax per row: `exp(l[pos]) / (exp(l[pos]) + exp(l[neg]))`,
    /// returned as an `r×1` column.
    pub fn pair_softmax(&mut self, logits: Var, pos: usize, neg: usize) -> Result<Var> {
        let tl = self.value(logits);
        for i in [pos, neg] {
            if i >= tl.cols() {
                return Err(Error::IndexOutOfRange {
                    what: "vocabulary",
                    index: i,
                    len: tl.cols(),
                });
            }
        }
        let data = tl
            .iter_rows()
            .map(|row| super::functional::pair_softmax(row[pos], row[neg]))
            .collect();
        let out = Tensor::new(tl.rows(), 1, data)?;
        self.push("pair_softmax", out, Op::PairSoftmax { logits, pos, neg }, &[logits])
    }

    /// Adds two scalars or same-shape tensors; convenience for loss sums.
    pub fn add_scaled(&mut self, a: Var, b: Var, b_scale: f64) -> Result<Var> {
        let sb = self.affine(b, b_scale, 0.0)?;
        self.add(a, sb)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let bt = tb.transpose();
                    matmul_into(g.data(), bt.data(), ga.data_mut(), g.rows(), g.cols(), ta.cols());
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    let at = ta.transpose();
                    matmul_into(at.data(), g.data(), gb.data_mut(), ta.cols(), ta.rows(), g.cols());
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, tb, |x, y| x * y));
                acc(*b, zip(g, ta, |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for row in g.iter_rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*bias, gb);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(ts.rows(), 1);
                for r in 0..g.rows() {
                    let f = ts.data()[r];
                    gs.data_mut()[r] = super::functional::dot(g.row_slice(r), ta.row_slice(r));
                    ga.row_slice_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                acc(*a, ga);
                acc(*s, gs);
            }
            Op::ScaleBy(a, s) => {
                let f = self.value(*s).item();
                let ga = g.scale(f);
                let gs = Tensor::scalar(super::functional::dot(g.data(), self.value(*a).data()));
                acc(*a, ga);
                acc(*s, gs);
            }
            Op::Affine(a, mul) => acc(*a, g.scale(*mul)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, zip(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(*a, zip(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Recip(a) => acc(*a, zip(g, y, |gv, r| -gv * r * r)),
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let inner = super::functional::dot(yr, gr);
                    for (o, (yv, gv)) in ga.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_slice_mut(r);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, gl);
            }
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), d);
                let mut gb = Tensor::zeros(tb.rows(), d);
                for i in 0..ta.rows() {
                    let ra = ta.row_slice(i);
                    for j in 0..tb.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let rb = tb.row_slice(j);
                        let (na, nb) = (norms_a[i], norms_b[j]);
                        let denom = na * nb + NORM_EPS;
                        let dot = super::functional::dot(ra, rb);
                        // d cos / d a = b / D - dot * nb * a / (na * D^2)
                        let ca = if na > 0.0 { dot * nb / (na * denom * denom) } else { 0.0 };
                        let cb = if nb > 0.0 { dot * na / (nb * denom * denom) } else { 0.0 };
                        let gar = ga.row_slice_mut(i);
                        for t in 0..d {
                            gar[t] += gij * (rb[t] / denom - ca * ra[t]);
                        }
                        let gbr = gb.row_slice_mut(j);
                        for t in 0..d {
                            gbr[t] += gij * (ra[t] / denom - cb * rb[t]);
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::RmsNorm { x, inv_rms } => {
                let tx = self.value(*x);
                let cols = tx.cols().max(1) as f64;
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    let (xr, gr) = (tx.row_slice(r), g.row_slice(r));
                    let inv = inv_rms[r];
                    let gdotx = super::functional::dot(gr, xr);
                    let c = gdotx * inv * inv * inv / cols;
                    for (o, (xv, gv)) in gx.row_slice_mut(r).iter_mut().zip(xr.iter().zip(gr)) {
                        *o = gv * inv - xv * c;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(g.rows() * ca);
                let mut gb = Vec::with_capacity(g.rows() * cb);
                for row in g.iter_rows() {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::new(g.rows(), ca, ga).expect("shape"));
                acc(*b, Tensor::new(g.rows(), cb, gb).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [rows, cols] = self.shape(p);
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(p, Tensor::new(rows, cols, slice).expect("shape"));
                    offset += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let [rows, cols] = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (t, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(t)) {
                        *o += v;
                    }
                }
                acc(*a, ga);
            }
            Op::ReplaceRows { base, rows, idx } => {
                let mut gbase = g.clone();
                let mut grows = Tensor::zeros(idx.len(), g.cols());
                for (t, &i) in idx.iter().enumerate() {
                    grows.row_slice_mut(t).copy_from_slice(g.row_slice(i));
                    gbase.row_slice_mut(i).iter_mut().for_each(|v| *v = 0.0);
                }
                acc(*base, gbase);
                acc(*rows, grows);
            }
            Op::SliceCols(a, start) => {
                let [rows, cols] = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let [rows, cols] = self.shape(*a);
                acc(*a, Tensor::filled(rows, cols, g.item()));
            }
            Op::Mean(a) => {
                let [rows, cols] = self.shape(*a);
                acc(*a, Tensor::filled(rows, cols, g.item() / (rows * cols) as f64));
            }
            Op::PairSoftmax { logits, pos, neg } => {
                let [rows, cols] = self.shape(*logits);
                let mut gl = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let s = y.data()[r];
                    let d = g.data()[r] * s * (1.0 - s);
                    gl.set(r, *pos, gl.get(r, *pos) + d);
                    gl.set(r, *neg, gl.get(r, *neg) - d);
                }
                acc(*logits, gl);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let z = tape.constant(Tensor::row(&[0.5, -0.5]));
        let rz = tape.relu(z).unwrap();
        assert_eq!(tape.value(rz).data(), &[0.5, 0.0]);
        let zero = tape.constant(Tensor::zeros(1, 4));
        let r0 = tape.relu(zero).unwrap();
        assert_eq!(tape.value(r0).data(), &[0.0; 4]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap());
        let s = tape.softmax(x, Axis::Rows).unwrap();
        let v = tape.value(s);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((v.get(1, 1) - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn softmax_cols_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.3, 2.0], [1.0, -1.0], [0.0, 0.5]]).unwrap());
        let s = tape.softmax(x, Axis::Cols).unwrap();
        let v = tape.value(s);
        for c in 0..2 {
            let total: f64 = (0..3).map(|r| v.get(r, c)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 5.0, 5.0], [0.0, 0.0, 9.0], [1.0, 2.0, 3.0]]).unwrap());
        let s = tape.causal_softmax(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(1), &[0.5, 0.5, 0.0]);
        assert!((v.row_slice(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(1, 5));
        let ce = tape.cross_entropy(u, &[3]).unwrap();
        assert!((tape.value(ce).item() - 5f64.ln()).abs() < 1e-12);

        let l = tape.constant(Tensor::row(&[10.0, 0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        // -ln(e^10 / (e^10 + 2)) = ln(1 + 2e^-10)
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((tape.value(ce).item() - expected).abs() < 1e-15);
        assert!((expected - 9.08e-5).abs() < 1e-7);

        let l = tape.constant(Tensor::row(&[0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(ce).item() - 2f64.ln()).abs() < 1e-15);

        assert!(matches!(
            tape.cross_entropy(l, &[2]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_batch_average() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::row(&[0.2, -1.0, 0.7]));
        let single = tape.cross_entropy(one, &[2]).unwrap();
        let batch = tape.constant(Tensor::from_rows(&[[0.2, -1.0, 0.7]; 4]).unwrap());
        let avg = tape.cross_entropy(batch, &[2; 4]).unwrap();
        assert!((tape.value(single).item() - tape.value(avg).item()).abs() < 1e-15);
    }

    #[test]
    fn cosine_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let c = tape.cosine(a, b).unwrap();
        let v = tape.value(c);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-11);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(1, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-11);
        assert_eq!(v.get(2, 0), 0.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 1.0]));
        assert!(matches!(tape.recip(x), Err(Error::NonFinite { op: "recip" })));
    }

    #[test]
    fn replace_rows_routes_gradients() {
        let mut tape = Tape::new();
        let base = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let rows = tape.leaf(Tensor::from_rows(&[[7.0, 8.0]]).unwrap());
        let out = tape.replace_rows(base, rows, &[1]).unwrap();
        assert_eq!(tape.value(out).row_slice(1), &[7.0, 8.0]);
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(base).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.get(rows).unwrap().data(), &[1.0, 1.0]);
        assert!(tape.replace_rows(base, rows, &[3]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }
}
