//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. Nodes are only ever appended, so the node order is
//! a topological order and `backward` simply walks it in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    backward_done: bool,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Gradient of the loss with respect to a leaf, after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = value.shape().to_vec();
        let value = Tensor::new(v, value.into_data())?;
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a parameter as a gradient-tracking leaf; repeated calls return the same var.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = params.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = shape2(self.value(a));
        let (k2, c) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![r, c], out), Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = shape2(self.value(a));
        let (c, k2) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; r * c];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![r, c], out), Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, data), op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x[r×c] + row[1×c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = shape2(self.value(x));
        if self.value(row).numel() != c {
            return Err(Error::dim(format!(
                "add_row {:?} + {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let rv = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *d += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(Tensor::from_parts(vec![r, c], data), Op::AddRow(x, row), ng, "add_row")
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), op, ng, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", kernels::gelu)
    }

    /// Softmax along the last axis. Columns with `keep[j] == false` receive zero weight.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = shape2(self.value(x));
        if c == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        if let Some(k) = keep {
            if k.len() != c {
                return Err(Error::dim(format!("softmax mask of {} for {} columns", k.len(), c)));
            }
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            kernels::softmax_in_place(&mut data[i * c..(i + 1) * c], keep);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), ng, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = shape2(self.value(x));
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim(format!("layer_norm width {c}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(Tensor::from_parts(vec![r, c], out), op, ng, "layer_norm")
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = shape2(self.value(table));
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::dim(format!("gather id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        let ng = self.needs(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::from_parts(vec![ids.len(), c], out), op, ng, "gather")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::dim(format!("concat_rows width {} vs {}", t.cols(), c)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x));
        if start + len > r {
            return Err(Error::dim(format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim(format!("reshape {:?} to {:?}", t.shape(), shape)));
        }
        let data = t.data().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), ng, "reshape")
    }

    /// Row-major flatten into a single row.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[1, n])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `t×d`, `k` and `v` are `s×d`. Key `j` is visible to query `i`
    /// when `key_keep[j]` holds and, if `causal`, `j <= i`. A query that sees
    /// no key yields a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_keep: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let (t, d) = shape2(self.value(q));
        let (s, dk) = shape2(self.value(k));
        let (s2, dv) = shape2(self.value(v));
        if dk != d || dv != d || s2 != s {
            return Err(Error::dim(format!(
                "attention q {:?} k {:?} v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = key_keep {
            if m.len() != s {
                return Err(Error::dim(format!("key mask of {} for {} keys", m.len(), s)));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut keep = vec![false; t * s];
        for i in 0..t {
            for j in 0..s {
                keep[i * s + j] = key_keep.is_none_or(|m| m[j]) && (!causal || j <= i);
            }
        }
        let mut probs = vec![0.0; heads * t * s];
        let mut out = vec![0.0; t * d];
        let (mut qh, mut kh, mut vh) = (vec![0.0; t * dh], vec![0.0; s * dh], vec![0.0; s * dh]);
        let mut oh = vec![0.0; t * dh];
        for h in 0..heads {
            let off = h * dh;
            head_slice(qd, d, off, dh, &mut qh);
            head_slice(kd, d, off, dh, &mut kh);
            head_slice(vd, d, off, dh, &mut vh);
            let p = &mut probs[h * t * s..(h + 1) * t * s];
            kernels::gemm_nt(&qh, &kh, p, t, dh, s);
            for i in 0..t {
                let row = &mut p[i * s..(i + 1) * s];
                row.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_in_place(row, Some(&keep[i * s..(i + 1) * s]));
            }
            oh.iter_mut().for_each(|x| *x = 0.0);
            kernels::gemm_nn(p, &vh, &mut oh, t, s, dh);
            for i in 0..t {
                out[i * d + off..i * d + off + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push(Tensor::from_parts(vec![t, d], out), op, ng, "attention")
    }

    /// Mean token-level negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = shape2(self.value(logits));
        if targets.len() != r || r == 0 {
            return Err(Error::dim(format!("{} targets for {} logit rows", targets.len(), r)));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::dim(format!("target {y} out of range {c}")));
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[y];
            kernels::softmax_in_place(row, None);
        }
        loss /= r as f64;
        let ng = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, ng, "cross_entropy")
    }

    /// Inverted dropout. A zero rate returns `x` unchanged without recording anything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, ng, "dropout")
    }

    /// Populates gradients of every gradient-tracking leaf with d(loss)/d(leaf).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice on the same tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Graph("loss is detached from every trainable leaf".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let val = |v: Var| &nodes[v.0].value;
        let want = |v: Var| nodes[v.0].needs_grad;
        // Returns the accumulation buffer for `v`, allocating zeros on first use.
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, k) = shape2(val(a));
                let c = val(b).cols();
                if want(a) {
                    gemm_nt(g, val(b).data(), buf(grads, nodes, a), r, c, k);
                }
                if want(b) {
                    gemm_tn(val(a).data(), g, buf(grads, nodes, b), r, k, c);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (r, k) = shape2(val(a));
                let c = val(b).rows();
                if want(a) {
                    gemm_nn(g, val(b).data(), buf(grads, nodes, a), r, c, k);
                }
                if want(b) {
                    gemm_tn(g, val(a).data(), buf(grads, nodes, b), r, c, k);
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if want(v) {
                        axpy(buf(grads, nodes, v), g, sign);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if want(v) {
                        axpy(buf(grads, nodes, v), g, sign);
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if want(x) {
                    axpy(buf(grads, nodes, x), g, 1.0);
                }
                if want(row) {
                    let c = val(row).numel();
                    let gr = buf(grads, nodes, row);
                    for chunk in g.chunks_exact(c) {
                        for (o, &v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    let bd = val(b).data();
                    for ((o, &gv), &bv) in buf(grads, nodes, a).iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if want(b) {
                    let ad = val(a).data();
                    for ((o, &gv), &av) in buf(grads, nodes, b).iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            &Op::Scale(x, c) => axpy(buf(grads, nodes, x), g, c),
            &Op::Tanh(x) => {
                let y = node.value.data();
                for ((o, &gv), &yv) in buf(grads, nodes, x).iter_mut().zip(g).zip(y) {
                    *o += gv * (1.0 - yv * yv);
                }
            }
            &Op::Gelu(x) => {
                let xd = val(x).data();
                for ((o, &gv), &xv) in buf(grads, nodes, x).iter_mut().zip(g).zip(xd) {
                    *o += gv * kernels::gelu_grad(xv);
                }
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let gx = buf(grads, nodes, x);
                for ((gr, yr), out) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let inner = kernels::dot(gr, yr);
                    for j in 0..c {
                        out[j] += yr[j] * (gr[j] - inner);
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
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = node.value.cols();
                let gd = val(gain).data();
                if want(gain) {
                    let gg = buf(grads, nodes, gain);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if want(bias) {
                    let gb = buf(grads, nodes, bias);
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                }
                if want(x) {
                    let gx = buf(grads, nodes, x);
                    let mut dh = vec![0.0; c];
                    for (i, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = kernels::dot(&dh, hr) / c as f64;
                        let out = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = val(*table).cols();
                let gt = buf(grads, nodes, *table);
                for (row, &id) in g.chunks_exact(c).zip(ids) {
                    for (o, &v) in gt[id * c..(id + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if want(p) {
                        axpy(buf(grads, nodes, p), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = val(x).cols();
                let gx = buf(grads, nodes, x);
                axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
            }
            &Op::Reshape(x) => axpy(buf(grads, nodes, x), g, 1.0),
            &Op::Sum(x) => {
                let gv = g[0];
                buf(grads, nodes, x).iter_mut().for_each(|o| *o += gv);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (t, d) = shape2(val(q));
                let s = val(k).rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = val(q).data();
                let kd = val(k).data();
                let vd = val(v).data();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; s * d];
                let mut dv = vec![0.0; s * d];
                let (mut qh, mut kh, mut vh, mut gh) = (vec![0.0; t * dh], vec![0.0; s * dh], vec![0.0; s * dh], vec![0.0; t * dh]);
                let (mut dqh, mut dkh, mut dvh) = (vec![0.0; t * dh], vec![0.0; s * dh], vec![0.0; s * dh]);
                let mut ds = vec![0.0; t * s];
                for h in 0..heads {
                    let off = h * dh;
                    head_slice(qd, d, off, dh, &mut qh);
                    head_slice(kd, d, off, dh, &mut kh);
                    head_slice(vd, d, off, dh, &mut vh);
                    head_slice(g, d, off, dh, &mut gh);
                    let p = &probs[h * t * s..(h + 1) * t * s];
                    ds.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_nt(&gh, &vh, &mut ds, t, dh, s);
                    for i in 0..t {
                        let pr = &p[i * s..(i + 1) * s];
                        let dr = &mut ds[i * s..(i + 1) * s];
                        let inner = kernels::dot(pr, dr);
                        for (x, &pj) in dr.iter_mut().zip(pr) {
                            *x = pj * (*x - inner) * scale;
                        }
                    }
                    dvh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn(p, &gh, &mut dvh, t, s, dh);
                    dqh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_nn(&ds, &kh, &mut dqh, t, s, dh);
                    dkh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn(&ds, &qh, &mut dkh, t, s, dh);
                    for (full, part, rows) in [(&mut dq, &dqh, t), (&mut dk, &dkh, s), (&mut dv, &dvh, s)] {
                        for r in 0..rows {
                            full[r * d + off..r * d + off + dh].copy_from_slice(&part[r * dh..(r + 1) * dh]);
                        }
                    }
                }
                for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
                    if want(var) {
                        axpy(buf(grads, nodes, var), &delta, 1.0);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let r = targets.len();
                let gv = g[0] / r as f64;
                let gl = buf(grads, nodes, *logits);
                for (i, &y) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[i * c + j] += gv * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((o, &gv), &m) in buf(grads, nodes, *x).iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
        }
    }

    /// Adds `scale ·` each bound parameter's gradient into the parameter's grad slot.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet, scale: f64) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Graph("accumulate before backward".into()));
        }
        for (&id, &var) in &self.bound {
            if let Some(g) = self.grad(var) {
                let slot = params
                    .get_mut(id)
                    .grad_mut()
                    .ok_or_else(|| Error::Graph("parameter without grad slot".into()))?;
                if slot.len() != g.len() {
                    return Err(Error::dim("parameter changed shape while bound"));
                }
                axpy(slot, g, scale);
            }
        }
        Ok(())
    }
}

/// Copies columns `off..off + dh` of a row-major `? × d` matrix into a contiguous buffer.
fn head_slice(src: &[f64], d: usize, off: usize, dh: usize, dst: &mut [f64]) {
    for (r, chunk) in dst.chunks_exact_mut(dh).enumerate() {
        chunk.copy_from_slice(&src[r * d + off..r * d + off + dh]);
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let b = tape.constant(m(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = tape.constant(m(&[&[1.0, 2.0]])).unwrap();
        let y = tape.constant(m(&[&[3.0], &[4.0]])).unwrap();
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let cases: [(&[f64], &[f64]); 3] = [
            (&[5.0], &[1.0]),
            (&[0.0, 0.0, 0.0, 0.0], &[0.25, 0.25, 0.25, 0.25]),
            (&[0.0, 3f64.ln()], &[0.25, 0.75]),
        ];
        for (input, expect) in cases {
            let x = tape.constant(m(&[input])).unwrap();
            let y = tape.softmax(x, None).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let empty = tape.constant(Tensor::zeros(&[1, 0])).unwrap();
        assert!(tape.softmax(empty, None).is_err());
    }

    #[test]
    fn gelu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.0, 10.0, 1.0]])).unwrap();
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated with mpmath at 30 digits.
        assert!((v[2] - 0.841_191_990_608_276_7).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_of_product_is_other_factor() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[1.0, -2.0, 3.0]]), true).unwrap();
        let y = tape.leaf(m(&[&[4.0, 5.0, -6.0]]), true).unwrap();
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 5.0, -6.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[0.3, -1.2, 2.0, 0.0]]), true).unwrap();
        let y = tape.softmax(x, None).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[1.0]]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[1.0, 2.0]]), true).unwrap();
        assert!(tape.backward(x).is_err());

        let mut tape = Tape::new();
        let c = tape.constant(m(&[&[1.0, 2.0]])).unwrap();
        let s = tape.sum(c).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn shared_input_gradients_add_up() {
        // loss = sum(x*a) + sum(x*b) => grad x = a + b
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[1.0, 2.0]]), true).unwrap();
        let a = tape.constant(m(&[&[3.0, -1.0]])).unwrap();
        let b = tape.constant(m(&[&[0.5, 4.0]])).unwrap();
        let xa = tape.mul(x, a).unwrap();
        let xb = tape.mul(x, b).unwrap();
        let sa = tape.sum(xa).unwrap();
        let sb = tape.sum(xb).unwrap();
        let l = tape.add(sa, sb).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.5, 3.0]);
    }

    #[test]
    fn attention_fully_masked_query_yields_zero_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let k = tape.constant(Tensor::full(&[2, 2], 1.0)).unwrap();
        let v = tape.constant(Tensor::full(&[2, 2], 3.0)).unwrap();
        let o = tape.attention(q, k, v, 1, Some(&[false, false]), false).unwrap();
        assert_eq!(tape.value(o).data(), &[0.0, 0.0]);
    }
}
