use rand::Rng as _;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Parameter, Tensor};
use crate::{Error, Result, Rng};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packing of a batch of sequences for [`Graph::attention`].
///
/// Queries are laid out as `batch × q_len` rows and keys/values as
/// `batch × k_len` rows. Keys at positions `>= key_valid[b]` are masked;
/// when `causal` is set, query `i` only sees keys `j <= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_valid: Vec<usize>,
    pub causal: bool,
}

impl AttnLayout {
    fn allowed(&self, b: usize, i: usize) -> usize {
        let valid = self.key_valid[b];
        if self.causal {
            valid.min(i + 1)
        } else {
            valid
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        epsilon: f64,
        normalizer: f64,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of primitive operations in execution (hence topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record a parameter's current value; frozen parameters get no gradient.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.leaf(p.tensor.clone(), !p.frozen);
        if !p.frozen {
            self.params.push((v, p.name.clone()));
        }
        v
    }

    /// Add each trainable leaf's gradient into the parameter of the same name.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        let mut by_name: std::collections::HashMap<&str, Vec<&[f64]>> = Default::default();
        for (v, name) in &self.params {
            if let Some(g) = self.grad(*v) {
                by_name.entry(name.as_str()).or_default().push(g);
            }
        }
        for p in params {
            if p.frozen {
                continue;
            }
            if let Some(gs) = by_name.get(p.name.as_str()) {
                for g in gs {
                    p.add_grad(g);
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Add a length-`h` bias to every row of `x[..×h]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let h = tx.cols();
        if tb.numel() != h {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        if h > 0 {
            for row in data.chunks_mut(h) {
                for (o, b) in row.iter_mut().zip(tb.data()) {
                    *o += b;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Normalize over the last axis, then apply elementwise scale and offset.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (tx, ts, to) = (self.value(x), self.value(scale), self.value(offset));
        let h = tx.cols();
        if ts.numel() != h {
            return Err(shape_err("layer_norm", tx, ts));
        }
        if to.numel() != h {
            return Err(shape_err("layer_norm", tx, to));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * ts.data()[j] + to.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(offset);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        let h = tx.cols();
        if h > 0 {
            for row in out.chunks_mut(h) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Gather rows of `table[V×h]`; gradients scatter back to the same rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (vocab, h) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { id, bound: vocab });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), h], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Label-smoothed negative log-likelihood averaged over non-pad rows.
    pub fn label_smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        self.label_smoothed_nll_scaled(logits, targets, epsilon, pad_id, count as f64)
    }

    /// Label-smoothed NLL summed over non-pad rows and divided by `normalizer`.
    ///
    /// Used for gradient accumulation, where the normalizer is the token count
    /// of the whole update rather than of one micro-batch.
    pub fn label_smoothed_nll_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
        normalizer: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "label_smoothed_nll",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Domain(format!("label smoothing {epsilon} not in [0,1)")));
        }
        if targets.iter().all(|&t| t == pad_id) {
            return Err(Error::EmptyBatch);
        }
        let v = tl.shape()[1];
        let off = epsilon / v as f64;
        let on = 1.0 - epsilon + off;
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index { id: t, bound: v });
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if t != pad_id {
                let mut loss = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let q = if j == t { on } else { off };
                    if q > 0.0 {
                        loss -= q * (x - lse);
                    }
                }
                total += loss;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / normalizer),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                pad_id,
                epsilon,
                normalizer,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout with a mask drawn from `rng`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let h = tq.cols();
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(vec![format!("{heads} heads do not divide width {h}")]));
        }
        if tk.cols() != h || tv.cols() != h {
            return Err(shape_err("attention", tq, tk));
        }
        if tk.shape() != tv.shape() {
            return Err(shape_err("attention", tk, tv));
        }
        let AttnLayout {
            batch,
            q_len,
            k_len,
            ..
        } = *layout;
        if tq.rows() != batch * q_len || tk.rows() != batch * k_len || layout.key_valid.len() != batch
        {
            return Err(Error::Shape {
                op: "attention",
                left: vec![tq.rows(), tk.rows()],
                right: vec![batch, q_len, k_len],
            });
        }
        if layout.key_valid.iter().any(|&n| n == 0 || n > k_len) {
            return Err(Error::Contract("attention needs 1..=k_len valid keys".into()));
        }
        let dh = h / heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; batch * q_len * h];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..q_len {
                    let qrow = &tq.data()[(b * q_len + i) * h + c0..(b * q_len + i) * h + c0 + dh];
                    let n = layout.allowed(b, i);
                    for (j, s) in scores.iter_mut().enumerate().take(n) {
                        let krow =
                            &tk.data()[(b * k_len + j) * h + c0..(b * k_len + j) * h + c0 + dh];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * sc;
                    }
                    softmax_in_place(&mut scores[..n]);
                    let pbase = ((b * heads + hd) * q_len + i) * k_len;
                    probs[pbase..pbase + n].copy_from_slice(&scores[..n]);
                    let orow = &mut out[(b * q_len + i) * h + c0..(b * q_len + i) * h + c0 + dh];
                    for (j, &p) in scores.iter().enumerate().take(n) {
                        let vrow =
                            &tv.data()[(b * k_len + j) * h + c0..(b * k_len + j) * h + c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * q_len, h], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Populate gradients of every trainable leaf reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |s| gemm_nt_acc(g, tb.data(), s, m, n, k));
                acc(*b, &mut |s| gemm_tn_acc(ta.data(), g, s, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // out = a bᵀ: da = g b, db = gᵀ a
                acc(*a, &mut |s| gemm_acc(g, tb.data(), s, m, n, k));
                acc(*b, &mut |s| gemm_tn_acc(g, ta.data(), s, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for ((o, gi), y) in s.iter_mut().zip(g).zip(tb.data()) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gi), x) in s.iter_mut().zip(g).zip(ta.data()) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let h = self.value(*x).cols();
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    for row in g.chunks(h) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (o, gi) in s.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |s| {
                    for ((o, gi), xi) in s.iter_mut().zip(g).zip(tx.data()) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                inv_std,
            } => {
                let ts = self.value(*scale);
                let h = ts.numel();
                acc(*x, &mut |s| {
                    let mut dxh = vec![0.0; h];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * h..(r + 1) * h];
                        let xr = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxh[j] = gr[j] * ts.data()[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / h as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                        for j in 0..h {
                            s[r * h + j] += is * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*scale, &mut |s| {
                    for (gr, xr) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*offset, &mut |s| {
                    for gr in g.chunks(h) {
                        add_into(s, gr);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let h = node.value.cols();
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(h).zip(g.chunks(h)).zip(y.chunks(h)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..h {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let h = self.value(*table).cols();
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::SmoothedNll {
                logits,
                targets,
                pad_id,
                epsilon,
                normalizer,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let off = epsilon / v as f64;
                let on = 1.0 - epsilon + off;
                let up = g[0] / normalizer;
                acc(*logits, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for j in 0..v {
                            let q = if j == t { on } else { off };
                            s[i * v + j] += up * (probs[i * v + j] - q);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for ((o, gi), m) in s.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, layout, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let h = tq.cols();
        let dh = h / heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let AttnLayout {
            batch,
            q_len,
            k_len,
            ..
        } = *layout;
        let mut dq = vec![0.0; tq.numel()];
        let mut dk = vec![0.0; tk.numel()];
        let mut dv = vec![0.0; tv.numel()];
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..q_len {
                    let n = layout.allowed(b, i);
                    let pbase = ((b * heads + hd) * q_len + i) * k_len;
                    let p = &probs[pbase..pbase + n];
                    let qo = (b * q_len + i) * h + c0;
                    let grow = &g[qo..qo + dh];
                    for j in 0..n {
                        let ko = (b * k_len + j) * h + c0;
                        dp[j] = grow.iter().zip(&tv.data()[ko..ko + dh]).map(|(a, c)| a * c).sum();
                        for (o, gi) in dv[ko..ko + dh].iter_mut().zip(grow) {
                            *o += p[j] * gi;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp[..n]).map(|(a, c)| a * c).sum();
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - dot) * sc;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (b * k_len + j) * h + c0;
                        for c in 0..dh {
                            dq[qo + c] += ds * tk.data()[ko + c];
                            dk[ko + c] += ds * tq.data()[qo + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                match &mut grads[var.0] {
                    Some(slot) => add_into(slot, &d),
                    None => grads[var.0] = Some(d),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}
