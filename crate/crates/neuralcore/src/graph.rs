//! Tape of tensor operations and the reverse sweep over it.

use std::collections::HashMap;

use crate::kernels::{self, attend_row, axpy, dot, layer_norm_row, log_softmax_row, matmul, matmul_tn_acc};
use crate::{Error, Grads, ParamSet, Real, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GatherRows(NodeId, Vec<usize>),
    PickCols(NodeId, Vec<usize>),
    LayerNorm(NodeId, Vec<T>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    ClippedSurrogate {
        logp: NodeId,
        old: Vec<T>,
        adv: Vec<T>,
        eps: f64,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward pass. Shape mismatches between operands are
/// programming errors and panic.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
    n_params: usize,
}

impl<T: Real> Graph<T> {
    /// A graph whose gradients are reported for a parameter set of `n_params`
    /// entries.
    pub fn new(n_params: usize) -> Self {
        Self { nodes: Vec::new(), param_nodes: HashMap::new(), n_params }
    }

    pub fn for_params(params: &ParamSet<T>) -> Self {
        Self::new(params.len())
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param_at(params, idx))
    }

    pub fn param_at(&mut self, params: &ParamSet<T>, idx: usize) -> NodeId {
        assert!(idx < self.n_params, "parameter index outside this graph's set");
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let id = self.push(params.value(idx).clone(), Op::Param(idx), true);
        self.param_nodes.insert(idx, id);
        id
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise operands differ in size");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        assert_eq!(vb.rows(), k, "matmul inner dimension");
        let n = vb.cols();
        let data = matmul(va.data(), vb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, data), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Adds the vector `b[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = va.cols();
        assert_eq!(vb.len(), n, "row broadcast width");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ct = T::of_f64(c);
        self.unary(a, move |x| x * ct, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let ct = T::of_f64(c);
        self.unary(a, move |x| x + ct, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_row_in_place(row);
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        let mut data = vec![T::zero(); va.len()];
        for (row, out) in va.data().chunks(n).zip(data.chunks_mut(n)) {
            log_softmax_row(row, out);
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x.as_f64()).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(a), ng)
    }

    /// Mean of all entries, accumulated in f64.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Mean(a), ng)
    }

    /// Selects rows of a matrix (also serves as an embedding lookup).
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        let m = va.rows();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather row {r} out of {m}");
            data.extend_from_slice(&va.data()[r * n..(r + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(rows.len(), n, data), Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// `out[i] = a[i, cols[i]]`.
    pub fn pick_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        assert_eq!(va.rows(), cols.len(), "one column per row");
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < n, "column {c} out of {n}");
                va.data()[i * n + c]
            })
            .collect();
        let ng = self.needs(a);
        self.push(Tensor::vector(data), Op::PickCols(a, cols.to_vec()), ng)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        let mut data = vec![T::zero(); va.len()];
        let mut inv = Vec::with_capacity(va.rows());
        for (row, out) in va.data().chunks(n).zip(data.chunks_mut(n)) {
            inv.push(layer_norm_row(row, out));
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm(a, inv), ng)
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`, stacked as rows of `q`, `k`, `v` (each `[batch*seq, d]`).
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> NodeId {
        let (vq, vk, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = vq.cols();
        assert_eq!(vq.rows(), batch * seq, "attention rows");
        assert_eq!(vk.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); batch * seq * d];
        let mut probs = vec![T::zero(); heads * batch * seq * seq];
        let mut head_out = vec![T::zero(); dh];
        for b in 0..batch {
            let base = b * seq * d;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let row = base + i * d;
                    let p_off = ((h * batch + b) * seq + i) * seq;
                    attend_row(
                        &vq.data()[row + col..row + col + dh],
                        &vk.data()[base..base + seq * d],
                        &vv.data()[base..base + seq * d],
                        d,
                        col,
                        i + 1,
                        scale,
                        &mut probs[p_off..p_off + seq],
                        &mut head_out,
                    );
                    out[row + col..row + col + dh].copy_from_slice(&head_out);
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Tensor::matrix(batch * seq, d, out),
            Op::Attention { q, k, v, batch, seq, heads, probs },
            ng,
        )
    }

    /// Per-token clipped surrogate `min(ρA, clip(ρ, 1-ε, 1+ε)A)` with
    /// `ρ = exp(logp - old)`; `old` and `adv` are constants.
    pub fn clipped_surrogate(&mut self, logp: NodeId, old: &[T], adv: &[T], eps: f64) -> NodeId {
        let vl = &self.nodes[logp.0].value;
        assert_eq!(vl.len(), old.len());
        assert_eq!(vl.len(), adv.len());
        let lo = T::of_f64(1.0 - eps);
        let hi = T::of_f64(1.0 + eps);
        let data = vl
            .data()
            .iter()
            .zip(old)
            .zip(adv)
            .map(|((&l, &o), &a)| {
                let ratio = (l - o).exp();
                let unclipped = ratio * a;
                let clipped = ratio.max(lo).min(hi) * a;
                unclipped.min(clipped)
            })
            .collect();
        let ng = self.needs(logp);
        self.push(
            Tensor::vector(data),
            Op::ClippedSurrogate { logp, old: old.to_vec(), adv: adv.to_vec(), eps },
            ng,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Grads::new(self.n_params);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Grads<T>) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut send = |id: NodeId, f: &dyn Fn(&mut [T])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                let t = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                out.accumulate(*p, &t);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                send(*a, &|ga| {
                    let bt = kernels::transpose(vb.data(), k, n);
                    let d = matmul(g, &bt, m, n, k);
                    for (x, y) in ga.iter_mut().zip(d) {
                        *x += y;
                    }
                });
                send(*b, &|gb| matmul_tn_acc(gb, va.data(), g, m, k, n));
            }
            Op::Add(a, b) => {
                send(*a, &|ga| add_into(ga, g));
                send(*b, &|gb| add_into(gb, g));
            }
            Op::AddRow(a, b) => {
                send(*a, &|ga| add_into(ga, g));
                let n = val(*b).len();
                send(*b, &|gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                send(*a, &|ga| add_into(ga, g));
                send(*b, &|gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, &|ga| {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(vb.data()) {
                        *x += gi * bi;
                    }
                });
                send(*b, &|gb| {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(va.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::of_f64(*c);
                send(*a, &|ga| axpy(ga, c, g));
            }
            Op::AddScalar(a) => send(*a, &|ga| add_into(ga, g)),
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, &|ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, &|ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                send(*a, &|ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi;
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                send(*a, &|ga| {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(va.data()) {
                        *x += gi / ai;
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                let two = T::of_f64(2.0);
                send(*a, &|ga| {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(va.data()) {
                        *x += two * gi * ai;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                send(*a, &|ga| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((x, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let n = y.cols();
                send(*a, &|ga| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                        for ((x, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - yi.exp() * s;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                send(*a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::of_f64(val(*a).len() as f64);
                send(*a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let n = val(*a).cols();
                send(*a, &|ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::PickCols(a, cols) => {
                let n = val(*a).cols();
                send(*a, &|ga| {
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                });
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let n = y.cols();
                let nf = T::of_f64(n as f64);
                send(*a, &|ga| {
                    for (r, ((gr, yr), xr)) in
                        g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)).enumerate()
                    {
                        let mean_g = gr.iter().fold(T::zero(), |s, &v| s + v) / nf;
                        let mean_gy = dot(gr, yr) / nf;
                        for ((x, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += inv[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g, grads);
            }
            Op::ClippedSurrogate { logp, old, adv, eps } => {
                let vl = val(*logp);
                let lo = T::of_f64(1.0 - eps);
                let hi = T::of_f64(1.0 + eps);
                send(*logp, &|gl| {
                    for i in 0..gl.len() {
                        let ratio = (vl.data()[i] - old[i]).exp();
                        let unclipped = ratio * adv[i];
                        let clipped = ratio.max(lo).min(hi) * adv[i];
                        if unclipped <= clipped {
                            gl[i] += g[i] * unclipped;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (vq, vk, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = vq.cols();
        let dh = d / heads;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut gq = vec![T::zero(); vq.len()];
        let mut gk = vec![T::zero(); vk.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            let base = b * seq * d;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let p_off = ((h * batch + b) * seq + i) * seq;
                    let p = &probs[p_off..p_off + i + 1];
                    let gi_row = base + i * d + col;
                    let g_out = &g[gi_row..gi_row + dh];
                    let mut s = T::zero();
                    for j in 0..=i {
                        let vj = base + j * d + col;
                        dp[j] = dot(g_out, &vv.data()[vj..vj + dh]);
                        s += p[j] * dp[j];
                        axpy(&mut gv[vj..vj + dh], p[j], g_out);
                    }
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = base + j * d + col;
                        axpy(&mut gq[gi_row..gi_row + dh], ds, &vk.data()[kj..kj + dh]);
                        axpy(&mut gk[kj..kj + dh], ds, &vq.data()[gi_row..gi_row + dh]);
                    }
                }
            }
        }
        for (id, local) in [(q, gq), (k, gk), (v, gv)] {
            if !self.nodes[id.0].needs_grad {
                continue;
            }
            match &mut grads[id.0] {
                Some(acc) => add_into(acc, &local),
                slot @ None => *slot = Some(local),
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
