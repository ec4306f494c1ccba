//! A small reverse-mode differentiation tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every parameter leaf. The op set is exactly
//! what the dual encoders and the contrastive head need.

use std::collections::HashMap;

use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRow {
        a: NodeId,
        row: usize,
    },
    MeanRows(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    NormalizeRows {
        a: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name, produced by [`Graph::backward`].
pub type Gradients = HashMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Repeated calls with the same name return the
    /// same node so that gradients from every use are summed.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.param_index.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        debug_assert_eq!(cols, r.cols());
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Multiplies every entry of `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).as_scalar();
        let v = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out and receives probability zero.
    pub fn softmax_rows(&mut self, a: NodeId, causal: bool) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let limit = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..limit]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let o = out.row_mut(r);
            for c in 0..limit {
                let e = (row[c] - max).exp();
                o[c] = e;
                total += e;
            }
            for v in &mut o[..limit] {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column count");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> NodeId {
        let v = Tensor::row_vector(self.value(a).row(row).to_vec());
        let rg = self.rg(a);
        self.push(v, Op::SelectRow { a, row }, rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = av.rows() as f64;
        let v = av.sum_rows().scale(1.0 / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// L2-normalises each row. Returns `None` if any row has zero norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Option<NodeId> {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = dot(av.row(r), av.row(r)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return None;
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(a);
        Some(self.push(out, Op::NormalizeRows { a, norms }, rg))
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per logit row");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Back-propagates from the scalar node `root` and returns the gradient
    /// of every parameter leaf that the root depends on.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        self.params
            .iter()
            .filter(|(_, id)| id.0 <= root.0)
            .filter_map(|(name, id)| grads[id.0].take().map(|g| (name.clone(), g)))
            .collect()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_rows());
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).as_scalar();
                acc(*a, g.scale(sv));
                if self.rg(*s) {
                    acc(*s, Tensor::scalar(dot(g.data(), self.value(*a).data())));
                }
            }
            Op::Exp(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= y;
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let (rows, cols) = (g.rows(), g.cols());
                if self.rg(*gain) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gain, dg);
                }
                if self.rg(*bias) {
                    acc(*bias, g.sum_rows());
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dh = g.get(r, c) * gv[c];
                            mean_d += dh;
                            mean_dx += dh * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let dh = g.get(r, c) * gv[c];
                            dx.set(r, c, rstd[r] * (dh - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(av.data()) {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let deriv = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    *dv *= deriv;
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut d = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let s = dot(g.row(r), p.row(r));
                    for c in 0..p.cols() {
                        d.set(r, c, p.get(r, c) * (g.get(r, c) - s));
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        let cols = g.cols();
                        let d = Tensor::from_vec(
                            h,
                            cols,
                            g.data()[offset * cols..(offset + h) * cols].to_vec(),
                        );
                        acc(p, d);
                    }
                    offset += h;
                }
            }
            Op::SelectRow { a, row } => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                d.row_mut(*row).copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (x, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *x = gv * inv;
                    }
                }
                acc(*a, d);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += gv;
                    }
                }
                acc(*table, d);
            }
            Op::NormalizeRows { a, norms } => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yg = dot(y.row(r), g.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * yg) / norms[r]);
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.as_scalar() / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let v = d.get(r, label);
                    d.set(r, label, v - 1.0);
                }
                acc(*logits, d.scale(scale));
            }
        }
    }
}
