//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the graph through [`Graph::param`], which memoizes one leaf per parameter
//! so that repeated uses accumulate into a single gradient. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient for every trainable parameter that was touched.
//!
//! Ops are coarse (layer norm, grouped softmax, conv, RoI-Align, the loss
//! reductions) so that each backward rule can be checked in isolation against
//! finite differences.

use std::collections::{HashMap, HashSet};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Kind tag for an op, used to target backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    LayerNorm,
    Softmax,
    Conv2d,
    RoiAlign,
    Gelu,
    RowNormalize,
    Other,
}

/// A box in continuous feature-map coordinates `(x0, y0, x1, y1)`.
pub type RoiBox = [f64; 4];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SoftmaxGroups {
        x: NodeId,
        group: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    MeanRows(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    RowNormalize {
        x: NodeId,
        eps: f64,
    },
    XLogX(NodeId),
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
        beta: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    RoiAlign {
        fmap: NodeId,
        boxes: Vec<RoiBox>,
        pooled: usize,
    },
    StraightThrough {
        soft: NodeId,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul(..) | Op::MatMulT(..) => OpKind::MatMul,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxGroups { .. } => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::RoiAlign { .. } => OpKind::RoiAlign,
            Op::Gelu(_) => OpKind::Gelu,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
            _ => OpKind::Other,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific saved values (layer-norm inverse std per row).
    aux: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

/// Gradients of a scalar with respect to the parameters used in the graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `grad` to the gradient of `id`.
    pub fn accumulate_tensor(&mut self, id: ParamId, grad: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                self.grads.insert(id, grad);
            }
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over every gradient entry, summed in parameter order.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        ids.iter()
            .map(|id| self.grads[id].norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    frozen: HashSet<ParamId>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters in `frozen` enter the graph as constants.
    pub fn with_frozen(frozen: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            frozen: frozen.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Test hook: corrupts the backward rule of every op of `kind` by
    /// scaling the gradients it emits by 1.1.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Vec<f64>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(p) => !self.frozen.contains(p),
            _ => op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param(id), Vec::new());
        self.param_nodes.insert(id, n);
        n
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), Vec::new())
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b), Vec::new())
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a), Vec::new())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), Vec::new())
    }

    /// Broadcast-adds a `[1, m]` (or `[m]`) row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let xv = self.value(x);
        let r = self.value(row).data();
        let cols = xv.cols();
        assert_eq!(r.len(), cols, "add_row: width mismatch");
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|a| a * factor);
        self.push(v, Op::Scale(x, factor), Vec::new())
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x), Vec::new())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), Vec::new())
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), Vec::new())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), Vec::new())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), Vec::new())
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (row, orow) in xv.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                orow[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, gain, bias }, inv_std)
    }

    /// Softmax over consecutive groups of `group` columns in every row.
    pub fn softmax_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let v = softmax_groups(self.value(x), group);
        self.push(v, Op::SoftmaxGroups { x, group }, Vec::new())
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let cols = self.value(x).cols();
        self.softmax_groups(x, cols)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            Tensor::new(vec![r, len], data),
            Op::SliceCols { x, start },
            Vec::new(),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor::new(vec![len, c], data),
            Op::SliceRows { x, start },
            Vec::new(),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(pv.row_slice(r));
            }
        }
        self.push(
            Tensor::new(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            Vec::new(),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            Vec::new(),
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row_slice(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), c], data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Vec::new(),
        )
    }

    /// Column means, `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::row(out), Op::MeanRows(x), Vec::new())
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), Vec::new())
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).norm_sq();
        self.push(Tensor::scalar(s), Op::SumSquares(x), Vec::new())
    }

    /// `x_i / (‖x_i‖₂ + eps)` for every row.
    pub fn row_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(out, Op::RowNormalize { x, eps }, Vec::new())
    }

    /// Elementwise `x ln x`, with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(xlogx);
        self.push(v, Op::XLogX(x), Vec::new())
    }

    /// Mean smooth-L1 over every element of `pred - target`; zero for empty inputs.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId, beta: f64) -> NodeId {
        let p = self.value(pred);
        let t = self.value(target);
        assert_eq!(p.shape(), t.shape(), "smooth_l1: shape mismatch");
        let n = p.len();
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| smooth_l1(a - b, beta))
            .sum();
        let v = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Tensor::scalar(v),
            Op::SmoothL1 { pred, target, beta },
            Vec::new(),
        )
    }

    /// Summed (not averaged) softmax cross-entropy of each row against its target.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: target count");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row_slice(r);
            total += log_sum_exp(row) - row[t];
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Vec::new(),
        )
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        );
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            Vec::new(),
        )
    }

    /// RoI-Align of a `[C, H, W]` map into `[boxes, C·P·P]` rows.
    pub fn roi_align(&mut self, fmap: NodeId, boxes: &[RoiBox], pooled: usize) -> NodeId {
        let v = roi_align_forward(self.value(fmap), boxes, pooled);
        self.push(
            v,
            Op::RoiAlign {
                fmap,
                boxes: boxes.to_vec(),
                pooled,
            },
            Vec::new(),
        )
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: Tensor) -> NodeId {
        assert_eq!(self.value(soft).shape(), hard.shape());
        self.push(hard, Op::StraightThrough { soft }, Vec::new())
    }

    // ---- backward ----------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every trainable
    /// parameter that reaches it.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                out.grads.insert(p, g);
                continue;
            }
            let mut contributions = self.backward_op(i, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    for v in c.data_mut() {
                        *v *= 1.1;
                    }
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        out
    }

    fn backward_op(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::new();
                if needs(*a) {
                    v.push((*a, matmul_t(g, val(*b))));
                }
                if needs(*b) {
                    v.push((*b, matmul(&transpose(val(*a)), g)));
                }
                v
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let mut v = Vec::new();
                if needs(*a) {
                    v.push((*a, matmul(g, val(*b))));
                }
                if needs(*b) {
                    v.push((*b, matmul(&transpose(g), val(*a))));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, transpose(g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip(g, val(*b), |x, y| x * y)),
                (*b, zip(g, val(*a), |x, y| x * y)),
            ],
            Op::AddRow(x, row) => {
                let cols = g.cols();
                let mut gr = vec![0.0; cols];
                for chunk in g.data().chunks(cols) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                let rshape = val(*row).shape().to_vec();
                vec![(*x, g.clone()), (*row, Tensor::new(rshape, gr))]
            }
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Gelu(x) => vec![(*x, zip(g, val(*x), |gv, xv| gv * gelu_grad(xv)))],
            Op::Tanh(x) => vec![(*x, zip(g, &node.value, |gv, y| gv * (1.0 - y * y)))],
            Op::Sigmoid(x) => vec![(*x, zip(g, &node.value, |gv, y| gv * y * (1.0 - y)))],
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let gn = val(*gain).data();
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for (r, ((row, grow), dxrow)) in xv
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                    .enumerate()
                {
                    let inv = node.aux[r];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * gn[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let n = cols as f64;
                    for j in 0..cols {
                        dxrow[j] = inv / n * (n * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                let gshape = val(*gain).shape().to_vec();
                let bshape = val(*bias).shape().to_vec();
                vec![
                    (*x, dx),
                    (*gain, Tensor::new(gshape, dgain)),
                    (*bias, Tensor::new(bshape, dbias)),
                ]
            }
            Op::SoftmaxGroups { x, group } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for ((yg, gg), dg) in y
                    .data()
                    .chunks(*group)
                    .zip(g.data().chunks(*group))
                    .zip(dx.data_mut().chunks_mut(*group))
                {
                    let dot: f64 = yg.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for k in 0..*group {
                        dg[k] = yg[k] * (gg[k] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (drow, grow) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(pv.len());
                    for grow in g.data().chunks(total) {
                        d.extend_from_slice(&grow[offset..offset + w]);
                    }
                    v.push((*p, Tensor::new(pv.shape().to_vec(), d)));
                    offset += w;
                }
                v
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let n = pv.len();
                    v.push((
                        *p,
                        Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec()),
                    ));
                    offset += n;
                }
                v
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (k, &r) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (d, s) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let r = xv.rows() as f64;
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for row in dx.data_mut().chunks_mut(c) {
                    for (d, gv) in row.iter_mut().zip(g.data()) {
                        *d = gv / r;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => {
                let gv = g.item();
                vec![(*x, val(*x).map(|_| gv))]
            }
            Op::SumSquares(x) => {
                let gv = g.item();
                vec![(*x, val(*x).map(|v| 2.0 * v * gv))]
            }
            Op::RowNormalize { x, eps } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for ((row, grow), drow) in xv
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.data_mut().chunks_mut(c))
                {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = n + eps;
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = grow[j] / s;
                        if n > 0.0 {
                            drow[j] -= dot / (s * s) * row[j] / n;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::XLogX(x) => vec![(
                *x,
                zip(g, val(*x), |gv, xv| if xv > 0.0 { gv * (xv.ln() + 1.0) } else { 0.0 }),
            )],
            Op::SmoothL1 { pred, target, beta } => {
                let p = val(*pred);
                let t = val(*target);
                let n = p.len().max(1) as f64;
                let gv = g.item();
                let dp = zip(p, t, |a, b| gv * smooth_l1_grad(a - b, *beta) / n);
                let dt = dp.map(|v| -v);
                vec![(*pred, dp), (*target, dt)]
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let gv = g.item();
                let mut dl = softmax_groups(lv, lv.cols());
                let c = lv.cols();
                for (r, &t) in targets.iter().enumerate() {
                    dl.data_mut()[r * c + t] -= 1.0;
                }
                vec![(*logits, dl.map(|v| v * gv))]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (di, dw, db) =
                    conv2d_backward(val(*input), val(*weight), g, *stride, *pad, needs(*input));
                let bshape = val(*bias).shape().to_vec();
                let mut v = vec![(*weight, dw), (*bias, Tensor::new(bshape, db))];
                if let Some(di) = di {
                    v.push((*input, di));
                }
                v
            }
            Op::RoiAlign {
                fmap,
                boxes,
                pooled,
            } => vec![(*fmap, roi_align_backward(val(*fmap), boxes, *pooled, g))],
            Op::StraightThrough { soft } => vec![(*soft, g.clone())],
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Relu(x)
        | Op::Gelu(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::MeanRows(x)
        | Op::Sum(x)
        | Op::SumSquares(x)
        | Op::XLogX(x) => vec![*x],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::SoftmaxGroups { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::GatherRows { x, .. }
        | Op::RowNormalize { x, .. } => vec![*x],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::SmoothL1 { pred, target, .. } => vec![*pred, *target],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => vec![*input, *weight, *bias],
        Op::RoiAlign { fmap, .. } => vec![*fmap],
        Op::StraightThrough { soft } => vec![*soft],
    }
}

// ---- kernels ---------------------------------------------------------

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub(crate) fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_t: inner dims {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row_slice(i);
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(b.row_slice(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, m], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub(crate) fn softmax_groups(x: &Tensor, group: usize) -> Tensor {
    assert!(group > 0 && x.len() % group == 0, "softmax group width");
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(group) {
        let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in chunk.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

pub(crate) fn smooth_l1(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        0.5 * r * r / beta
    } else {
        r.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let &[c, h, w] = input.shape() else {
        panic!("conv2d input must be [C, H, W], got {:?}", input.shape())
    };
    let &[o, c2, k, k2] = weight.shape() else {
        panic!("conv2d weight must be [O, C, k, k]")
    };
    assert_eq!(c, c2, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let (id, wd, bd) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[oc]);
        for ic in 0..c {
            let ip = &id[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((oc * c + ic) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &ip[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *ov += wv * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out)
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let &[c, h, w] = input.shape() else { unreachable!() };
    let &[o, _, k, _] = weight.shape() else { unreachable!() };
    let &[_, ho, wo] = g.shape() else { unreachable!() };
    let (id, wd, gd) = (input.data(), weight.data(), g.data());
    let mut dw = vec![0.0; weight.len()];
    let mut di = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut db = vec![0.0; o];
    for oc in 0..o {
        let gp = &gd[oc * ho * wo..(oc + 1) * ho * wo];
        db[oc] = gp.iter().sum();
        for ic in 0..c {
            let ip = &id[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                    let wv = wd[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = gp[oy * wo + ox];
                            acc += gv * ip[iy * w + ix as usize];
                            if want_input {
                                di[ic * h * w + iy * w + ix as usize] += gv * wv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    let di = want_input.then(|| Tensor::new(input.shape().to_vec(), di));
    (di, Tensor::new(weight.shape().to_vec(), dw), db)
}

/// Bilinear taps `(flat cell index, weight)` for one RoI-Align output cell.
///
/// Feature cell `(i, j)` is centered at continuous coordinate `(i + 0.5, j + 0.5)`.
/// Each of the `P×P` bins is sampled at a 2×2 regular grid and averaged.
fn roi_taps(h: usize, w: usize, b: &RoiBox, pooled: usize, py: usize, px: usize, taps: &mut Vec<(usize, f64)>) {
    const SAMPLES: usize = 2;
    taps.clear();
    let bin_w = (b[2] - b[0]) / pooled as f64;
    let bin_h = (b[3] - b[1]) / pooled as f64;
    let share = 1.0 / (SAMPLES * SAMPLES) as f64;
    for sy in 0..SAMPLES {
        let y = b[1] + py as f64 * bin_h + (sy as f64 + 0.5) * bin_h / SAMPLES as f64;
        for sx in 0..SAMPLES {
            let x = b[0] + px as f64 * bin_w + (sx as f64 + 0.5) * bin_w / SAMPLES as f64;
            bilinear_taps(h, w, y - 0.5, x - 0.5, share, taps);
        }
    }
}

fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y0, y1, ly) = axis_taps(y.max(0.0), h);
    let (x0, x1, lx) = axis_taps(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((y0 * w + x0, scale * hy * hx));
    taps.push((y0 * w + x1, scale * hy * lx));
    taps.push((y1 * w + x0, scale * ly * hx));
    taps.push((y1 * w + x1, scale * ly * lx));
}

fn axis_taps(v: f64, size: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo + 1 >= size {
        (size - 1, size - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

fn roi_align_forward(fmap: &Tensor, boxes: &[RoiBox], pooled: usize) -> Tensor {
    let &[c, h, w] = fmap.shape() else {
        panic!("roi_align expects [C, H, W]")
    };
    let width = c * pooled * pooled;
    let mut out = vec![0.0; boxes.len() * width];
    let mut taps = Vec::with_capacity(16);
    let fd = fmap.data();
    for (r, b) in boxes.iter().enumerate() {
        for py in 0..pooled {
            for px in 0..pooled {
                roi_taps(h, w, b, pooled, py, px, &mut taps);
                for ch in 0..c {
                    let plane = &fd[ch * h * w..(ch + 1) * h * w];
                    let v: f64 = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
                    out[r * width + ch * pooled * pooled + py * pooled + px] = v;
                }
            }
        }
    }
    Tensor::new(vec![boxes.len(), width], out)
}

fn roi_align_backward(fmap: &Tensor, boxes: &[RoiBox], pooled: usize, g: &Tensor) -> Tensor {
    let &[c, h, w] = fmap.shape() else { unreachable!() };
    let width = c * pooled * pooled;
    let mut d = vec![0.0; fmap.len()];
    let mut taps = Vec::with_capacity(16);
    for (r, b) in boxes.iter().enumerate() {
        for py in 0..pooled {
            for px in 0..pooled {
                roi_taps(h, w, b, pooled, py, px, &mut taps);
                for ch in 0..c {
                    let gv = g.data()[r * width + ch * pooled * pooled + py * pooled + px];
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for &(i, wt) in &taps {
                        plane[i] += wt * gv;
                    }
                }
            }
        }
    }
    Tensor::new(fmap.shape().to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    /// Central-difference check of every input of a small graph function.
    fn check(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) -> f64 {
        let mut store = ParamStore::new();
        let ids: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| store.insert(&format!("in{i}"), t.clone()))
            .collect();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let nodes: Vec<_> = ids.iter().map(|&id| g.param(store, id)).collect();
            let out = f(&mut g, &nodes);
            (g, out)
        };
        let (g, out) = eval(&store);
        let grads = g.backward(out);
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for &id in &ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let (gp, op) = eval(&store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let (gm, om) = eval(&store);
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let an = grads.get(id).map_or(0.0, |t| t.data()[k]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn seeded(shape: Vec<usize>, seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data)
    }

    // Weighted sum so that every output element carries a distinct upstream gradient.
    fn weighted(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let w = seeded(g.value(x).shape().to_vec(), seed);
        let wn = g.constant(w);
        let m = g.mul(x, wn);
        g.sum(m)
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let err = check(vec![seeded(vec![3, 4], 1), seeded(vec![4, 2], 2), seeded(vec![5, 4], 3)], |g, n| {
            let a = g.matmul(n[0], n[1]);
            let b = g.matmul_t(n[0], n[2]);
            let bt = g.transpose(b);
            let s1 = weighted(g, a, 10);
            let s2 = weighted(g, bt, 11);
            g.add(s1, s2)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_grads() {
        let err = check(vec![seeded(vec![3, 5], 4), seeded(vec![1, 5], 5), seeded(vec![1, 5], 6)], |g, n| {
            let y = g.layer_norm(n[0], n[1], n[2]);
            weighted(g, y, 12)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_and_nonlinearity_grads() {
        let err = check(vec![seeded(vec![2, 6], 7)], |g, n| {
            let s = g.softmax_groups(n[0], 3);
            let t = g.tanh(n[0]);
            let ge = g.gelu(n[0]);
            let sg = g.sigmoid(n[0]);
            let a = weighted(g, s, 13);
            let b = weighted(g, t, 14);
            let c = weighted(g, ge, 15);
            let d = weighted(g, sg, 16);
            let ab = g.add(a, b);
            let cd = g.add(c, d);
            g.add(ab, cd)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reshaping_op_grads() {
        let err = check(vec![seeded(vec![4, 3], 8), seeded(vec![4, 2], 9), seeded(vec![1, 3], 17)], |g, n| {
            let cc = g.concat_cols(&[n[0], n[1]]);
            let sc = g.slice_cols(cc, 1, 3);
            let sr = g.slice_rows(sc, 1, 2);
            let cr = g.concat_rows(&[sr, n[2]]);
            let ga = g.gather_rows(cr, &[2, 0, 2]);
            let mr = g.mean_rows(ga);
            let ar = g.add_row(ga, mr);
            weighted(g, ar, 18)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn loss_op_grads() {
        let err = check(vec![seeded(vec![3, 4], 19), seeded(vec![3, 4], 20)], |g, n| {
            let big = g.scale(n[0], 3.0);
            let sl = g.smooth_l1(big, n[1], 1.0);
            let ce = g.cross_entropy_sum(n[0], &[1, 3, 0]);
            let rn = g.row_normalize(n[1], 1e-8);
            let ss = g.sum_squares(rn);
            let w = weighted(g, rn, 21);
            let p = g.softmax(n[1]);
            let xl = g.xlogx(p);
            let xs = g.sum(xl);
            let a = g.add(sl, ce);
            let b = g.add(ss, w);
            let c = g.add(a, b);
            g.add(c, xs)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_and_roi_grads() {
        let err = check(
            vec![seeded(vec![2, 7, 6], 22), seeded(vec![3, 2, 3, 3], 23), seeded(vec![3], 24)],
            |g, n| {
                let y = g.conv2d(n[0], n[1], n[2], 2, 1);
                let r = g.roi_align(y, &[[0.3, 0.2, 2.9, 3.7], [0.0, 0.0, 3.0, 4.0]], 2);
                weighted(g, r, 25)
            },
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_path() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row(vec![0.1, 0.7, 0.2]));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let hard = g.straight_through(x, Tensor::row(vec![0.0, 1.0, 0.0]));
        assert_eq!(g.value(hard).data(), &[0.0, 1.0, 0.0]);
        let l = weighted(&mut g, hard, 3);
        let grads = g.backward(l);
        assert_eq!(grads.get(id).unwrap().data(), seeded(vec![1, 3], 3).data());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::row(vec![1.0, 2.0]));
        let b = store.insert("b", Tensor::row(vec![3.0, 4.0]));
        let mut g = Graph::with_frozen([a]);
        let an = g.param(&store, a);
        let bn = g.param(&store, b);
        let m = g.mul(an, bn);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
