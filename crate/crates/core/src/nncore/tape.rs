//! Reverse-mode automatic differentiation over a per-example tape.
//!
//! A `Tape` records eagerly-evaluated operations; `backward` walks the
//! recorded nodes in reverse and accumulates exact gradients into every
//! leaf. One tape per training example keeps graphs single-threaded while
//! batches fan out across threads and reduce gradients in a fixed order.

use std::sync::Arc;

use crate::rng::Rng;

use super::tensor::{matmul, Tensor};

/// Stable identity of a trainable parameter, assigned by the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf(ParamId),
    Input,
    /// Same-shape addition, or `[m,n] + [n]` row broadcast.
    Add {
        a: NodeId,
        b: NodeId,
        broadcast_row: bool,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Tanh {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceRows {
        a: NodeId,
        from: usize,
    },
    SliceCols {
        a: NodeId,
        from: usize,
    },
    GatherRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Normalized activations and per-row 1/std, kept for the backward pass.
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SumSquares {
        a: NodeId,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradient of one parameter leaf.
///
/// Embedding tables receive `Rows` gradients (only looked-up rows carry
/// signal), everything else is `Dense`. Row lists may contain repeats; the
/// parameter store scatter-adds them.
pub enum GradBuf {
    Dense(Tensor),
    Rows {
        shape: [usize; 2],
        rows: Vec<usize>,
        /// `rows.len() * shape[1]` values, one block per listed row.
        data: Vec<f64>,
    },
}

pub type GradSet = Vec<(ParamId, GradBuf)>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    /// Registers a trainable leaf. Call once per parameter per tape; reusing
    /// the returned node accumulates gradients from all its uses.
    pub fn leaf(&mut self, value: Arc<Tensor>, param: ParamId) -> NodeId {
        let id = self.push(Value::Shared(value), Op::Leaf(param));
        self.leaves.push(id);
        id
    }

    /// Non-differentiable input data.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Value::Owned(t), Op::Input)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let broadcast_row = sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0];
        assert!(
            sa == sb || broadcast_row,
            "add shape mismatch: {sa:?} vs {sb:?}"
        );
        let mut out = self.value(a).clone();
        if broadcast_row {
            let bv = self.value(b).data().to_vec();
            for i in 0..out.rows() {
                for (o, v) in out.row_mut(i).iter_mut().zip(&bv) {
                    *o += v;
                }
            }
        } else {
            out.axpy(1.0, self.value(b));
        }
        self.push(
            Value::Owned(out),
            Op::Add {
                a,
                b,
                broadcast_row,
            },
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "mul shape mismatch: {sa:?} vs {sb:?}");
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(Value::Owned(out), Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        self.push(Value::Owned(out), Op::Scale { a, c })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(Value::Owned(out), Op::MatMul { a, b, ta, tb })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(Value::Owned(out), Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Value::Owned(out), Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Value::Owned(out), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu_fwd);
        self.push(Value::Owned(out), Op::Gelu { a })
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows). 1-D tensors
    /// use axis 0 and normalize the whole vector.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value(a);
        let out = softmax_fwd(v, axis);
        self.push(Value::Owned(out), Op::Softmax { a, axis })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        assert!(axis <= 1, "concat axis must be 0 or 1, got {axis}");
        let out = if axis == 0 {
            let cols = self.value(parts[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(
                    t.cols(),
                    cols,
                    "concat axis 0 column mismatch: {:?} vs {} cols",
                    t.shape(),
                    cols
                );
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)
        } else {
            let rows = self.value(parts[0]).rows();
            let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut out = Tensor::zeros(&[rows, total]);
            let mut at = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(
                    t.rows(),
                    rows,
                    "concat axis 1 row mismatch: {:?} vs {} rows",
                    t.shape(),
                    rows
                );
                let c = t.cols();
                for i in 0..rows {
                    out.row_mut(i)[at..at + c].copy_from_slice(t.row(i));
                }
                at += c;
            }
            out
        };
        self.push(
            Value::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.value(a);
        assert!(
            from < to && to <= v.rows(),
            "slice_rows {from}..{to} out of range for shape {:?}",
            v.shape()
        );
        let cols = v.cols();
        let data = v.data()[from * cols..to * cols].to_vec();
        let out = Tensor::new(vec![to - from, cols], data);
        self.push(Value::Owned(out), Op::SliceRows { a, from })
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.value(a);
        assert!(
            from < to && to <= v.cols(),
            "slice_cols {from}..{to} out of range for shape {:?}",
            v.shape()
        );
        let rows = v.rows();
        let mut out = Tensor::zeros(&[rows, to - from]);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&v.row(i)[from..to]);
        }
        self.push(Value::Owned(out), Op::SliceCols { a, from })
    }

    /// Gathers rows by index; this is the embedding lookup when `a` is an
    /// embedding-table leaf (its gradient then stays sparse).
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(a);
        let n = v.rows();
        let cols = v.cols();
        let mut out = Tensor::zeros(&[rows.len(), cols]);
        for (i, &r) in rows.iter().enumerate() {
            assert!(
                r < n,
                "gather row {r} out of range for shape {:?}",
                v.shape()
            );
            out.row_mut(i).copy_from_slice(v.row(r));
        }
        self.push(Value::Owned(out), Op::GatherRows { a, rows })
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.gather_rows(table, ids.to_vec())
    }

    /// Per-row layer normalization with affine scale, `y = g ⊙ x̂ + b`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        assert_eq!(
            self.value(gain).len(),
            cols,
            "layer_norm gain shape {:?} vs {cols} features",
            self.value(gain).shape()
        );
        assert_eq!(
            self.value(bias).len(),
            cols,
            "layer_norm bias shape {:?} vs {cols} features",
            self.value(bias).shape()
        );
        let mut xhat = Tensor::zeros(v.shape());
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &xv) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (xv - mean) * is;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Value::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout: surviving entries are scaled by 1/(1-p) at train
    /// time so evaluation is the identity.
    pub fn dropout(&mut self, a: NodeId, p: f64, train: bool, rng: &mut Rng) -> NodeId {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout p must be in [0,1), got {p}"
        );
        if !train || p == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let mut out = v.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(Value::Owned(out), Op::Dropout { a, mask })
    }

    /// Mean cross-entropy of softmax(logits) against integer labels, one
    /// label per logit row, computed in the log-sum-exp stable form.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let v = self.value(logits);
        let (rows, cols) = (v.rows(), v.cols());
        assert!(cols >= 2, "cross_entropy needs >= 2 classes, got {cols}");
        assert_eq!(
            labels.len(),
            rows,
            "cross_entropy: {} labels for {} logit rows",
            labels.len(),
            rows
        );
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            assert!(
                label < cols,
                "label {label} out of range for {cols} classes"
            );
            let row = v.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in probs.row_mut(i) {
                *p /= sum;
            }
            // -log softmax[label] = lse - x[label]
            total += max + sum.ln() - row[label];
        }
        let loss = Tensor::scalar(total / rows as f64);
        self.push(
            Value::Owned(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Σ x² as a scalar node (used for L2 penalties).
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Value::Owned(Tensor::scalar(s)), Op::SumSquares { a })
    }

    /// Backpropagates from a scalar loss node and returns the gradients of
    /// every leaf, in leaf registration order.
    pub fn backward(&mut self, loss: NodeId) -> GradSet {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<GradBuf>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(GradBuf::Dense(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )));

        for i in (0..self.nodes.len()).rev() {
            let Some(buf) = grads[i].take() else { continue };
            let g = match &buf {
                GradBuf::Dense(t) => t.clone(),
                GradBuf::Rows { .. } => {
                    // Only leaves accumulate sparsely, and leaves have no inputs.
                    grads[i] = Some(buf);
                    continue;
                }
            };
            match &self.nodes[i].op {
                Op::Leaf(_) | Op::Input => {
                    grads[i] = Some(buf);
                    continue;
                }
                Op::Add {
                    a,
                    b,
                    broadcast_row,
                } => {
                    let (a, b, broadcast_row) = (*a, *b, *broadcast_row);
                    add_dense(&mut grads, a, &g, &self.node_shape(a));
                    if broadcast_row {
                        let cols = g.cols();
                        let mut col_sum = Tensor::zeros(&[cols]);
                        for r in 0..g.rows() {
                            for (s, &v) in col_sum.data_mut().iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        add_dense(&mut grads, b, &col_sum, &self.node_shape(b));
                    } else {
                        add_dense(&mut grads, b, &g, &self.node_shape(b));
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *d *= v;
                    }
                    let mut db = g.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *d *= v;
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                    add_dense(&mut grads, b, &db, &self.node_shape(b));
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let mut da = g.clone();
                    da.scale_in_place(c);
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (da, db) = match (ta, tb) {
                        (false, false) => {
                            (matmul(&g, false, bv, true), matmul(av, true, &g, false))
                        }
                        (false, true) => {
                            (matmul(&g, false, bv, false), matmul(&g, true, av, false))
                        }
                        (true, false) => {
                            (matmul(bv, false, &g, true), matmul(av, false, &g, false))
                        }
                        (true, true) => (matmul(bv, true, &g, true), matmul(&g, true, av, true)),
                    };
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                    add_dense(&mut grads, b, &db, &self.node_shape(b));
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let y = self.nodes[i].value.get();
                    let mut da = g.clone();
                    for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - yv * yv;
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = self.nodes[i].value.get();
                    let mut da = g.clone();
                    for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::Relu { a } => {
                    let a = *a;
                    let x = self.value(a);
                    let mut da = g.clone();
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let x = self.value(a);
                    let mut da = g.clone();
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        *d *= gelu_grad(xv);
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::Softmax { a, axis } => {
                    let (a, axis) = (*a, *axis);
                    let y = self.nodes[i].value.get();
                    let da = softmax_bwd(y, &g, axis);
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    if axis == 0 {
                        let mut at = 0;
                        for p in parts {
                            let shape = self.node_shape(p);
                            let rows = self.value(p).rows();
                            let cols = g.cols();
                            let slice = Tensor::new(
                                vec![rows, cols],
                                g.data()[at * cols..(at + rows) * cols].to_vec(),
                            );
                            add_dense(&mut grads, p, &slice, &shape);
                            at += rows;
                        }
                    } else {
                        let mut at = 0;
                        for p in parts {
                            let shape = self.node_shape(p);
                            let (rows, cols) = (self.value(p).rows(), self.value(p).cols());
                            let mut slice = Tensor::zeros(&[rows, cols]);
                            for r in 0..rows {
                                slice.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                            }
                            add_dense(&mut grads, p, &slice, &shape);
                            at += cols;
                        }
                    }
                }
                Op::SliceRows { a, from } => {
                    let (a, from) = (*a, *from);
                    let shape = self.node_shape(a);
                    let cols = self.value(a).cols();
                    let buf = dense_grad_mut(&mut grads, a, &shape);
                    let base = from * cols;
                    for (o, &v) in buf.data_mut()[base..base + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += v;
                    }
                }
                Op::SliceCols { a, from } => {
                    let (a, from) = (*a, *from);
                    let shape = self.node_shape(a);
                    let width = g.cols();
                    let buf = dense_grad_mut(&mut grads, a, &shape);
                    for r in 0..g.rows() {
                        let dst = &mut buf.row_mut(r)[from..from + width];
                        for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::GatherRows { a, rows } => {
                    let (a, rows) = (*a, rows.clone());
                    let shape = self.node_shape(a);
                    let is_leaf = matches!(self.nodes[a.0].op, Op::Leaf(_));
                    let sparse_ok =
                        is_leaf && matches!(grads[a.0], None | Some(GradBuf::Rows { .. }));
                    if sparse_ok {
                        let cols = shape[1];
                        let slot = grads[a.0].get_or_insert_with(|| GradBuf::Rows {
                            shape: [shape[0], cols],
                            rows: Vec::new(),
                            data: Vec::new(),
                        });
                        if let GradBuf::Rows {
                            rows: rws, data, ..
                        } = slot
                        {
                            rws.extend_from_slice(&rows);
                            data.extend_from_slice(g.data());
                        }
                    } else {
                        let buf = dense_grad_mut(&mut grads, a, &shape);
                        for (i, &r) in rows.iter().enumerate() {
                            for (o, &v) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let n = xhat.cols() as f64;
                    let gv = self.value(gain).data().to_vec();
                    let mut dgain = Tensor::zeros(&[xhat.cols()]);
                    let mut dbias = Tensor::zeros(&[xhat.cols()]);
                    let mut dx = Tensor::zeros(xhat.shape());
                    for r in 0..xhat.rows() {
                        let grow = g.row(r);
                        let xh = xhat.row(r);
                        for j in 0..xh.len() {
                            dgain.data_mut()[j] += grow[j] * xh[j];
                            dbias.data_mut()[j] += grow[j];
                        }
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&gv).map(|(&gr, &gn)| gr * gn).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                        let is = inv_std[r];
                        for j in 0..xh.len() {
                            dx.row_mut(r)[j] =
                                is / n * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
                        }
                    }
                    add_dense(&mut grads, x, &dx, &self.node_shape(x));
                    add_dense(&mut grads, gain, &dgain, &self.node_shape(gain));
                    add_dense(&mut grads, bias, &dbias, &self.node_shape(bias));
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    let mut da = g.clone();
                    for (d, &m) in da.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let scale = g.item() / labels.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dl.row_mut(r)[label] -= 1.0;
                    }
                    dl.scale_in_place(scale);
                    add_dense(&mut grads, logits, &dl, &self.node_shape(logits));
                }
                Op::SumSquares { a } => {
                    let a = *a;
                    let mut da = self.value(a).clone();
                    da.scale_in_place(2.0 * g.item());
                    add_dense(&mut grads, a, &da, &self.node_shape(a));
                }
            }
        }

        let mut out = GradSet::new();
        for &leaf in &self.leaves {
            if let (Some(buf), Op::Leaf(pid)) = (grads[leaf.0].take(), &self.nodes[leaf.0].op) {
                out.push((*pid, buf));
            }
        }
        out
    }

    fn node_shape(&self, id: NodeId) -> Vec<usize> {
        self.value(id).shape().to_vec()
    }
}

fn add_dense(grads: &mut [Option<GradBuf>], id: NodeId, contribution: &Tensor, shape: &[usize]) {
    debug_assert_eq!(
        contribution.len(),
        shape.iter().product::<usize>(),
        "gradient size mismatch for node shape {shape:?}"
    );
    let buf = dense_grad_mut_inner(grads, id, shape);
    for (o, &v) in buf.data_mut().iter_mut().zip(contribution.data()) {
        *o += v;
    }
}

fn dense_grad_mut<'a>(
    grads: &'a mut [Option<GradBuf>],
    id: NodeId,
    shape: &[usize],
) -> &'a mut Tensor {
    dense_grad_mut_inner(grads, id, shape)
}

fn dense_grad_mut_inner<'a>(
    grads: &'a mut [Option<GradBuf>],
    id: NodeId,
    shape: &[usize],
) -> &'a mut Tensor {
    // Densify a sparse accumulator if one snuck in before a dense use.
    if let Some(GradBuf::Rows {
        shape: s,
        rows,
        data,
    }) = &grads[id.0]
    {
        let mut dense = Tensor::zeros(&[s[0], s[1]]);
        for (i, &r) in rows.iter().enumerate() {
            let cols = s[1];
            for (o, &v) in dense
                .row_mut(r)
                .iter_mut()
                .zip(&data[i * cols..(i + 1) * cols])
            {
                *o += v;
            }
        }
        grads[id.0] = Some(GradBuf::Dense(dense));
    }
    if grads[id.0].is_none() {
        grads[id.0] = Some(GradBuf::Dense(Tensor::zeros(shape)));
    }
    match grads[id.0].as_mut().unwrap() {
        GradBuf::Dense(t) => t,
        GradBuf::Rows { .. } => unreachable!(),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh form of GELU
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn softmax_fwd(v: &Tensor, axis: usize) -> Tensor {
    let mut out = v.clone();
    match (v.shape().len(), axis) {
        (1, 0) => softmax_slice(out.data_mut()),
        (2, 1) => {
            for i in 0..out.rows() {
                softmax_slice(out.row_mut(i));
            }
        }
        (2, 0) => {
            let (rows, cols) = (v.rows(), v.cols());
            for j in 0..cols {
                let mut col: Vec<f64> = (0..rows).map(|i| v.row(i)[j]).collect();
                softmax_slice(&mut col);
                for (i, val) in col.into_iter().enumerate() {
                    out.row_mut(i)[j] = val;
                }
            }
        }
        (d, a) => panic!(
            "softmax axis {a} invalid for {d}-D tensor of shape {:?}",
            v.shape()
        ),
    }
    out
}

fn softmax_slice(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn softmax_bwd(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let mut out = Tensor::zeros(y.shape());
    let bwd_slice = |yv: &[f64], gv: &[f64], ov: &mut [f64]| {
        let dot: f64 = yv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
        for ((o, &yi), &gi) in ov.iter_mut().zip(yv).zip(gv) {
            *o = yi * (gi - dot);
        }
    };
    match (y.shape().len(), axis) {
        (1, 0) => bwd_slice(y.data(), g.data(), out.data_mut()),
        (2, 1) => {
            for i in 0..y.rows() {
                let (yr, gr) = (y.row(i).to_vec(), g.row(i).to_vec());
                bwd_slice(&yr, &gr, out.row_mut(i));
            }
        }
        (2, 0) => {
            let (rows, cols) = (y.rows(), y.cols());
            for j in 0..cols {
                let yc: Vec<f64> = (0..rows).map(|i| y.row(i)[j]).collect();
                let gc: Vec<f64> = (0..rows).map(|i| g.row(i)[j]).collect();
                let mut oc = vec![0.0; rows];
                bwd_slice(&yc, &gc, &mut oc);
                for (i, val) in oc.into_iter().enumerate() {
                    out.row_mut(i)[j] = val;
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0);
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(&[5, 7], 3.0, &mut rng));
        let y = tape.softmax(x, 1);
        for i in 0..5 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
            assert!(tape.value(y).row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        // p = 0 at train time
        let y = tape.dropout(x, 0.0, true, &mut rng);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        // any p in eval mode
        let z = tape.dropout(x, 0.9, false, &mut rng);
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Inverted scaling: E[dropout(x)] == x, checked statistically.
        let n = 200_000;
        let mut rng = Rng::new(11);
        let mut sum = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::scalar(1.0));
            let y = tape.dropout(x, 0.3, true, &mut rng);
            sum += tape.value(y).item();
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn layer_norm_constant_vector_is_zero_before_affine() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 4], vec![5.0; 4]));
        let gain = tape.input(Tensor::new(vec![4], vec![1.0; 4]));
        let bias = tape.input(Tensor::new(vec![4], vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5);
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "expected 0, got {v}");
        }
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]);
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_overflow_safe() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]);
        let v = tape.value(loss).item();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9, "loss should be ~0, got {v}");
    }

    #[test]
    fn cross_entropy_batch_mean_matches_per_example_mean() {
        let mut rng = Rng::new(17);
        let logits = Tensor::randn(&[6, 4], 2.0, &mut rng);
        let labels = [0usize, 3, 1, 2, 2, 0];
        let mut tape = Tape::new();
        let l = tape.input(logits.clone());
        let batch = tape.cross_entropy(l, &labels);
        let batch_loss = tape.value(batch).item();

        let mut acc = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let mut t = Tape::new();
            let row = t.input(Tensor::new(vec![1, 4], logits.row(i).to_vec()));
            let li = t.cross_entropy(row, &[lab]);
            acc += t.value(li).item();
        }
        assert!((batch_loss - acc / labels.len() as f64).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "label 2 out of range for 2 classes")]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        tape.cross_entropy(logits, &[2]);
    }

    #[test]
    fn backward_through_product_matches_hand_gradient() {
        // f(x) = x · x at x = 3 has df/dx = 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Arc::new(Tensor::scalar(3.0)), ParamId(0));
        let y = tape.mul(x, x);
        let grads = tape.backward(y);
        assert_eq!(grads.len(), 1);
        match &grads[0].1 {
            GradBuf::Dense(t) => assert!((t.item() - 6.0).abs() < 1e-12),
            _ => panic!("expected dense grad"),
        }
    }

    #[test]
    fn gather_rows_on_leaf_stays_sparse() {
        let mut rng = Rng::new(4);
        let table = Arc::new(Tensor::randn(&[10, 3], 1.0, &mut rng));
        let mut tape = Tape::new();
        let t = tape.leaf(table, ParamId(0));
        let picked = tape.embedding_lookup(t, &[2, 7, 2]);
        let s = tape.sum_squares(picked);
        let grads = tape.backward(s);
        match &grads[0].1 {
            GradBuf::Rows { rows, data, .. } => {
                assert_eq!(rows, &[2, 7, 2]);
                assert_eq!(data.len(), 9);
            }
            _ => panic!("expected sparse rows grad"),
        }
    }
}
