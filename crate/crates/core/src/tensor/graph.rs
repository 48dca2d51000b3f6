use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{
    attention_backward, attention_forward, gelu_grad_scalar, gelu_scalar, log_sum_exp,
    matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place,
};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        offset: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Gradient-tracking graph in checked mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// Graph that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf input; gradients are reported for it when `requires_grad` is set.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let rg = requires_grad && self.grad_enabled;
        self.push(Op::Leaf, value, rg, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false, "constant")
    }

    /// Parameter leaf, shared with the store. Tracked only if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), Tensor::new(shape, data)?, rg, "add")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), Tensor::new(shape, data)?, rg, "scale")
    }

    /// Adds a length-`n` bias to every row of an m×n matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(b).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(Op::AddRowBias(x, b), Tensor::matrix(m, n, data)?, rg, "add_row_bias")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x), Tensor::new(shape, data)?, rg, "gelu")
    }

    /// Row-wise layer norm. Zero-variance rows normalize to zero before gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            Tensor::matrix(m, n, out)?,
            rg,
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Op::SoftmaxRows(x), Tensor::matrix(m, n, data)?, rg, "softmax_rows")
    }

    /// Gathers rows of `table` by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embed")?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Tensor::matrix(ids.len(), d, data)?,
            rg,
            "embed",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.dims2(parts[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, d],
                    rhs: vec![r, c],
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, d, data)?, rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::SliceRows { x, start }, Tensor::matrix(len, n, data)?, rg, "slice_rows")
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&xs[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            Tensor::matrix(rows.len(), n, data)?,
            rg,
            "gather_rows",
        )
    }

    /// Multi-head scaled dot-product attention. Query row `i` attends to key
    /// rows `0..=i + offset`, so `offset = 0` is plain causal attention and
    /// `offset = past_len` serves a KV-cached continuation.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        let (s, dk) = self.dims2(k, "attention")?;
        let (s2, dv) = self.dims2(v, "attention")?;
        if dk != d || dv != d || s2 != s || d % heads != 0 || t + offset > s {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![t, d, offset],
                rhs: vec![s, dk],
            });
        }
        let rg = self.rg(&[q, k, v]);
        let mut out = vec![0.0; t * d];
        let mut probs = if rg { vec![0.0; heads * t * s] } else { Vec::new() };
        attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
            if rg { Some(&mut probs) } else { None },
            t,
            s,
            d,
            heads,
            offset,
        );
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                offset,
                probs,
            },
            Tensor::matrix(t, d, out)?,
            rg,
            "attention",
        )
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions where `mask[t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let picks: Vec<(usize, usize)> = (0..t)
            .filter(|&i| mask[i])
            .map(|i| (i, targets[i]))
            .collect();
        if picks.is_empty() {
            return Err(TensorError::EmptyMask { op: "cross_entropy" });
        }
        let rg = self.rg(&[logits]);
        let lg = self.value(logits).data();
        let mut total = 0.0;
        let mut probs = if rg { Vec::with_capacity(picks.len() * v) } else { Vec::new() };
        for &(row, tgt) in &picks {
            if tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    len: v,
                });
            }
            let r = &lg[row * v..(row + 1) * v];
            let lse = log_sum_exp(r);
            total += lse - r[tgt];
            if rg {
                probs.extend(r.iter().map(|x| (x - lse).exp()));
            }
        }
        let loss = total / picks.len() as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                picks,
                probs,
            },
            Tensor::scalar(loss),
            rg,
            "cross_entropy",
        )
    }

    /// Mean squared error against a constant target of the same element count.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).numel() != target.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = target.numel() as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        self.push(
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            Tensor::scalar(loss),
            rg,
            "mse",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), t, rg, "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if self.checked && g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.want(*a) {
                    let da = slot(grads, *a, m * k);
                    matmul_bt_acc(g, bv.data(), da, m, n, k);
                }
                if self.want(*b) {
                    let db = slot(grads, *b, k * n);
                    matmul_at_acc(av.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.want(*x) {
                        let d = slot(grads, *x, g.len());
                        for (o, &gv) in d.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.want(*a) {
                    let d = slot(grads, *a, g.len());
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let n = out.cols();
                if self.want(*x) {
                    let d = slot(grads, *x, g.len());
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.want(*b) {
                    let d = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        for (o, &gv) in d.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.want(*x) {
                    let xv = self.value(*x).data();
                    let d = slot(grads, *x, g.len());
                    for ((o, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad_scalar(xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let m = out.rows();
                let gv = self.value(*gain).data();
                if self.want(*gain) {
                    let d = slot(grads, *gain, n);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.want(*bias) {
                    let d = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if self.want(*x) {
                    let d = slot(grads, *x, m * n);
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[i * n + j];
                        }
                        let r = rstd[i];
                        for j in 0..n {
                            d[i * n + j] += r / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.want(*x) {
                    let n = out.cols();
                    let y = out.data();
                    let d = slot(grads, *x, g.len());
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let inner: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if self.want(*table) {
                    let tv = self.value(*table);
                    let dcols = tv.cols();
                    let d = slot(grads, *table, tv.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dcols..(r + 1) * dcols];
                        for (o, &v) in d[id * dcols..(id + 1) * dcols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.want(*p) {
                        let d = slot(grads, *p, len);
                        for (o, &v) in d.iter_mut().zip(&g[off..off + len]) {
                            *o += v;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.want(*x) {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let d = slot(grads, *x, xv.numel());
                    for (o, &v) in d[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.want(*x) {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let d = slot(grads, *x, xv.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in d[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                offset,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (t, d) = (qv.shape()[0], qv.shape()[1]);
                let s = kv.shape()[0];
                let mut dq = self.want(*q).then(|| vec![0.0; t * d]);
                let mut dk = self.want(*k).then(|| vec![0.0; s * d]);
                let mut dv = self.want(*v).then(|| vec![0.0; s * d]);
                attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                    t,
                    s,
                    d,
                    *heads,
                    *offset,
                );
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = buf {
                        let dst = slot(grads, *var, buf.len());
                        for (o, x) in dst.iter_mut().zip(buf) {
                            *o += x;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                picks,
                probs,
            } => {
                if self.want(*logits) {
                    let lv = self.value(*logits);
                    let vsz = lv.cols();
                    let scale = g[0] / picks.len() as f64;
                    let d = slot(grads, *logits, lv.numel());
                    for (pi, &(row, tgt)) in picks.iter().enumerate() {
                        let p = &probs[pi * vsz..(pi + 1) * vsz];
                        let drow = &mut d[row * vsz..(row + 1) * vsz];
                        for (o, &pv) in drow.iter_mut().zip(p) {
                            *o += scale * pv;
                        }
                        drow[tgt] -= scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.want(*pred) {
                    let pv = self.value(*pred).data();
                    let n = target.len() as f64;
                    let d = slot(grads, *pred, pv.len());
                    for ((o, &p), &t) in d.iter_mut().zip(pv).zip(target) {
                        *o += g[0] * 2.0 * (p - t) / n;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.want(*x) {
                    let d = slot(grads, *x, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; `None` if it was not tracked
    /// or received no gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    /// Gradients of every tracked parameter, sorted by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(p, v)| self.grads[v.0].take().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = g.constant(t(&[&[1.5, -2.0], &[3.0, 4.25]])).unwrap();
        let r = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(r), g.value(m));

        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(t(&[&[1.0], &[1.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -5.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert!((v.row(0)[j] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((v.row(1)[0] - 1.0).abs() < 1e-12);
        assert!(v.row(1)[1] < 1e-12);
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 8])).unwrap();
        let l = g.cross_entropy(uniform, &[0, 5, 7], &[true, true, false]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let mut perfect = Tensor::zeros(&[1, 4]);
        perfect.data_mut()[2] = 200.0;
        let p = g.constant(perfect).unwrap();
        let l = g.cross_entropy(p, &[2], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-60);

        let e = g.cross_entropy(p, &[2], &[false]);
        assert!(matches!(e, Err(TensorError::EmptyMask { .. })));
    }

    #[test]
    fn masked_positions_get_no_gradient() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = g.input(Tensor::matrix(3, 4, data).unwrap(), true).unwrap();
        let l = g.cross_entropy(x, &[1, 2, 3], &[true, false, true]).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!(gx.row(1).iter().all(|&v| v == 0.0));
        assert!(gx.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[3.0, 3.0, 3.0, 3.0]])).unwrap();
        let gain = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checked_mode_names_the_op() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1e300, 1e300]])).unwrap();
        let y = g.constant(t(&[&[1e300], &[1e300]])).unwrap();
        assert_eq!(g.matmul(x, y), Err(TensorError::NonFinite { op: "matmul" }));
        let mut lax = Graph::new();
        lax.set_checked(false);
        let x = lax.constant(t(&[&[1e300, 1e300]])).unwrap();
        let y = lax.constant(t(&[&[1e300], &[1e300]])).unwrap();
        assert!(lax.matmul(x, y).is_ok());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(x) = sum((x·x + x) ⊙ 1) written with a reused node; df/dx_i = 2 x_i + 1
        // for a 1×1 case using matmul(x, x).
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 1, vec![1.7]).unwrap(), true).unwrap();
        let xx = g.matmul(x, x).unwrap();
        let s = g.add(xx, x).unwrap();
        let s2 = g.add(s, xx).unwrap(); // 2x² + x
        let l = g.reshape(s2, &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        let got = grads.wrt(x).unwrap().item();
        assert!((got - (4.0 * 1.7 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("a/w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let f = store.add("b/w", Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap(), true);
        store.set_group_trainable("b", false);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let fv = g.param(&store, f);
        let p = g.matmul(wv, fv).unwrap();
        let l = g.cross_entropy(p, &[0, 1], &[true, true]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.param(w).is_some());
        assert!(grads.param(f).is_none());
        assert!(!g.requires_grad(fv));
    }
}
