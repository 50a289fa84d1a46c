//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the inputs it needs
//! for the backward sweep. Parameters are leaves tagged with a slot index so
//! [`Gradients::params`] can hand back one gradient per tracked parameter,
//! zero-filled for parameters the loss never touched.
//!
//! All ops check their output for NaN/Inf and fail instead of propagating.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Segment boundaries: segment `i` covers `offsets[i]..offsets[i + 1]`.
pub type Offsets = Arc<Vec<usize>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
    SegmentSoftmax(Var, Offsets),
    SegmentWeightedSum {
        weights: Var,
        src: Var,
        edge_src: Arc<Vec<usize>>,
        offsets: Offsets,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowDistance(Var, Var),
    CrossEntropy(Var, Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Per-column statistics of a training-mode batch norm, for updating the
/// running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (n − 1 denominator).
    pub var: Vec<f64>,
}

/// The ordered record of primitive ops applied during one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf occupying gradient slot `slot`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Adds a length-`cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.len() != vx.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vr.shape().to_vec(),
            });
        }
        let mut value = vx.clone();
        let c = vx.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += vr.data()[i % c];
        }
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(elu);
        self.push("elu", value, Op::Elu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let value = self.value(x).map(|v| leaky_relu(v, slope));
        self.push("leaky_relu", value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of range for {} rows",
                vx.rows()
            )));
        }
        let value = vx.select_rows(&idx);
        self.push("gather_rows", value, Op::GatherRows(x, idx), &[x])
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {} rows",
                vx.rows()
            )));
        }
        let c = vx.cols();
        let value = Tensor::new(vec![end - start, c], vx.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..va.rows() {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Tensor::new(vec![va.rows(), ca + cb], data)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Softmax of a score vector independently within each segment.
    pub fn segment_softmax(&mut self, scores: Var, offsets: Offsets) -> Result<Var> {
        let vs = self.value(scores);
        check_offsets(&offsets, vs.len())?;
        let value = Tensor::new(vs.shape().to_vec(), segment_softmax(vs.data(), &offsets)?)?;
        self.push("segment_softmax", value, Op::SegmentSoftmax(scores, offsets), &[scores])
    }

    /// `out[i] = Σ_{e in segment i} weights[e] · src[edge_src[e]]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        src: Var,
        edge_src: Arc<Vec<usize>>,
        offsets: Offsets,
    ) -> Result<Var> {
        let (vw, vs) = (self.value(weights), self.value(src));
        check_offsets(&offsets, vw.len())?;
        if edge_src.len() != vw.len() {
            return Err(Error::Shape {
                op: "segment_weighted_sum",
                left: vw.shape().to_vec(),
                right: vec![edge_src.len()],
            });
        }
        if let Some(&bad) = edge_src.iter().find(|&&j| j >= vs.rows()) {
            return Err(Error::invalid(format!(
                "segment_weighted_sum source {bad} out of range for {} rows",
                vs.rows()
            )));
        }
        let n = offsets.len() - 1;
        let f = vs.cols();
        let mut out = Tensor::zeros(&[n, f]);
        for i in 0..n {
            let row = out.row_mut(i);
            for e in offsets[i]..offsets[i + 1] {
                let w = vw.data()[e];
                for (o, &s) in row.iter_mut().zip(vs.row(edge_src[e])) {
                    *o += w * s;
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum {
                weights,
                src,
                edge_src,
                offsets,
            },
            &[weights, src],
        )
    }

    /// Training-mode batch normalization over rows. Returns the output and
    /// the batch statistics used.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let vx = self.value(x);
        let (b, f) = (vx.rows(), vx.cols());
        if b < 2 {
            return Err(Error::invalid("batch_norm in train mode needs at least 2 rows"));
        }
        self.check_affine("batch_norm", x, gamma, beta)?;
        let mut mean = vec![0.0; f];
        for i in 0..b {
            for (m, v) in mean.iter_mut().zip(vx.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut sq = vec![0.0; f];
        for i in 0..b {
            for ((s, v), m) in sq.iter_mut().zip(vx.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / b as f64 + eps).sqrt()).collect();
        let var_unbiased: Vec<f64> = sq.iter().map(|s| s / (b - 1) as f64).collect();
        let mut xhat = Tensor::zeros(&[b, f]);
        for i in 0..b {
            let src = vx.row(i);
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let value = affine_cols(&xhat, self.value(gamma).data(), self.value(beta).data());
        let stats = BatchStats {
            mean,
            var: var_unbiased,
        };
        let out = self.push(
            "batch_norm",
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((out, stats))
    }

    /// Batch normalization using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_affine("batch_norm_eval", x, gamma, beta)?;
        let vx = self.value(x);
        if mean.len() != vx.cols() || var.len() != vx.cols() {
            return Err(Error::Shape {
                op: "batch_norm_eval",
                left: vx.shape().to_vec(),
                right: vec![mean.len(), var.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vx.clone();
        for i in 0..vx.rows() {
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (*h - mean[j]) * inv_std[j];
            }
        }
        let value = affine_cols(&xhat, self.value(gamma).data(), self.value(beta).data());
        self.push(
            "batch_norm_eval",
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let f = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).len() != f {
                return Err(Error::Shape {
                    op,
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Row-wise Euclidean distance between two equally shaped matrices,
    /// as a column vector. The gradient at coincident rows is zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_distance", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = (0..va.rows())
            .map(|i| crate::tensor::squared_distance(va.row(i), vb.row(i)).sqrt())
            .collect();
        let value = Tensor::new(vec![va.rows(), 1], data)?;
        self.push("row_distance", value, Op::RowDistance(a, b), &[a, b])
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= vl.cols()) {
            return Err(Error::invalid(format!("label {bad} out of range for {} classes", vl.cols())));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = vl.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push("cross_entropy", value, Op::CrossEntropy(logits, labels), &[logits])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|slot| (slot, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !self.needs(v) {
                return;
            }
            let slot = &mut grads[v.0];
            let t = slot.get_or_insert_with(|| Tensor::zeros(self.shape(v)));
            f(t);
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, p) = (va.rows(), va.cols(), vb.cols());
                acc(*a, &|t| matmul_bt_into(gd, vb.data(), t.data_mut(), n, k, p));
                acc(*b, &|t| matmul_at_into(va.data(), gd, t.data_mut(), n, k, p));
            }
            Op::Add(a, b) => {
                acc(*a, &|t| axpy(t.data_mut(), 1.0, gd));
                acc(*b, &|t| axpy(t.data_mut(), 1.0, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|t| axpy(t.data_mut(), 1.0, gd));
                acc(*b, &|t| axpy(t.data_mut(), -1.0, gd));
            }
            Op::AddRow(x, row) => {
                acc(*x, &|t| axpy(t.data_mut(), 1.0, gd));
                let c = g.cols();
                acc(*row, &|t| {
                    for (i, v) in gd.iter().enumerate() {
                        t.data_mut()[i % c] += v;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|t| axpy(t.data_mut(), *c, gd)),
            Op::AddScalar(x) => acc(*x, &|t| axpy(t.data_mut(), 1.0, gd)),
            Op::Sum(x) => acc(*x, &|t| t.data_mut().iter_mut().for_each(|v| *v += gd[0])),
            Op::Elu(x) => {
                let vx = self.value(*x);
                acc(*x, &|t| {
                    for ((o, &xv), &gv) in t.data_mut().iter_mut().zip(vx.data()).zip(gd) {
                        *o += gv * if xv > 0.0 { 1.0 } else { xv.exp() };
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                acc(*x, &|t| {
                    for ((o, &xv), &gv) in t.data_mut().iter_mut().zip(vx.data()).zip(gd) {
                        *o += gv * if xv > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, &|t| {
                    for ((o, &xv), &gv) in t.data_mut().iter_mut().zip(vx.data()).zip(gd) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                acc(*x, &|t| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(t.row_mut(i), 1.0, g.row(r));
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = g.cols();
                acc(*x, &|t| axpy(&mut t.data_mut()[start * c..start * c + gd.len()], 1.0, gd));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                acc(*a, &|t| {
                    for i in 0..g.rows() {
                        axpy(t.row_mut(i), 1.0, &g.row(i)[..ca]);
                    }
                });
                acc(*b, &|t| {
                    for i in 0..g.rows() {
                        axpy(t.row_mut(i), 1.0, &g.row(i)[ca..]);
                    }
                });
            }
            Op::SegmentSoftmax(x, offsets) => {
                let y = node.value.data();
                acc(*x, &|t| {
                    for w in offsets.windows(2) {
                        let (s, e) = (w[0], w[1]);
                        let inner = dot(&y[s..e], &gd[s..e]);
                        for k in s..e {
                            t.data_mut()[k] += y[k] * (gd[k] - inner);
                        }
                    }
                });
            }
            Op::SegmentWeightedSum {
                weights,
                src,
                edge_src,
                offsets,
            } => {
                let (vw, vs) = (self.value(*weights), self.value(*src));
                acc(*weights, &|t| {
                    for (i, w) in offsets.windows(2).enumerate() {
                        for e in w[0]..w[1] {
                            t.data_mut()[e] += dot(g.row(i), vs.row(edge_src[e]));
                        }
                    }
                });
                acc(*src, &|t| {
                    for (i, w) in offsets.windows(2).enumerate() {
                        for e in w[0]..w[1] {
                            axpy(t.row_mut(edge_src[e]), vw.data()[e], g.row(i));
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let (b, f) = (xhat.rows(), xhat.cols());
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        let dy = g.get(i, j);
                        sum_dy[j] += dy;
                        sum_dy_xhat[j] += dy * xhat.get(i, j);
                    }
                }
                acc(*gamma, &|t| axpy(t.data_mut(), 1.0, &sum_dy_xhat));
                acc(*beta, &|t| axpy(t.data_mut(), 1.0, &sum_dy));
                let bf = b as f64;
                acc(*x, &|t| {
                    for i in 0..b {
                        for j in 0..f {
                            let dy = g.get(i, j);
                            let dx = gm[j] * inv_std[j] / bf
                                * (bf * dy - sum_dy[j] - xhat.get(i, j) * sum_dy_xhat[j]);
                            t.data_mut()[i * f + j] += dx;
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let gm = self.value(*gamma).data();
                let f = vx.cols();
                acc(*x, &|t| {
                    for (k, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[k] * gm[k % f] * inv_std[k % f];
                    }
                });
                acc(*gamma, &|t| {
                    for (k, &gv) in gd.iter().enumerate() {
                        let j = k % f;
                        t.data_mut()[j] += gv * (vx.data()[k] - mean[j]) * inv_std[j];
                    }
                });
                acc(*beta, &|t| {
                    for (k, &gv) in gd.iter().enumerate() {
                        t.data_mut()[k % f] += gv;
                    }
                });
            }
            Op::RowDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = node.value.data();
                let unit = |i: usize, j: usize| {
                    if d[i] > 0.0 {
                        (va.get(i, j) - vb.get(i, j)) / d[i]
                    } else {
                        0.0
                    }
                };
                let c = va.cols();
                acc(*a, &|t| {
                    for (i, g) in gd.iter().enumerate() {
                        for j in 0..c {
                            t.data_mut()[i * c + j] += g * unit(i, j);
                        }
                    }
                });
                acc(*b, &|t| {
                    for (i, g) in gd.iter().enumerate() {
                        for j in 0..c {
                            t.data_mut()[i * c + j] -= g * unit(i, j);
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let vl = self.value(*logits);
                let n = labels.len() as f64;
                acc(*logits, &|t| {
                    for (i, &y) in labels.iter().enumerate() {
                        let row = vl.row(i);
                        let lse = log_sum_exp(row);
                        let out = t.row_mut(i);
                        for (j, &z) in row.iter().enumerate() {
                            let p = (z - lse).exp();
                            let target = if j == y { 1.0 } else { 0.0 };
                            out[j] += gd[0] * (p - target) / n;
                        }
                    }
                });
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter slot, given the slot shapes. Slots the loss
    /// never reached get zeros.
    pub fn params(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(slot, node) in &self.params {
            if let (Some(g), Some(o)) = (&self.grads[node], out.get_mut(slot)) {
                axpy(o.data_mut(), 1.0, g.data());
            }
        }
        out
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn affine_cols(xhat: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let f = xhat.cols();
    let mut out = xhat.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * gamma[k % f] + beta[k % f];
    }
    out
}

fn check_offsets(offsets: &[usize], len: usize) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&len) {
        return Err(Error::invalid(format!(
            "segments must partition 0..{len}, got bounds {:?}..{:?}",
            offsets.first(),
            offsets.last()
        )));
    }
    if offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("segment offsets must be non-decreasing"));
    }
    Ok(())
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax within each segment. Empty segments are rejected.
pub fn segment_softmax(scores: &[f64], offsets: &[usize]) -> Result<Vec<f64>> {
    check_offsets(offsets, scores.len())?;
    let mut out = vec![0.0; scores.len()];
    for (i, w) in offsets.windows(2).enumerate() {
        let (s, e) = (w[0], w[1]);
        if s == e {
            return Err(Error::EmptySegment(i));
        }
        let m = scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in s..e {
            out[k] = (scores[k] - m).exp();
            total += out[k];
        }
        out[s..e].iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}
