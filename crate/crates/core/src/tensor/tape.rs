use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, AttnShape};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Gate { x: Var, g: Var },
    Silu { x: Var },
    RmsNorm { x: Var, w: Var, inv: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, n_heads: usize, head_dim: usize, theta: f32 },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32>, dropout: Option<Vec<f32>> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, probs: Vec<f32>, count: usize },
    ConcatRows { parts: Vec<Var> },
    Sum { x: Var },
    SumSquares { x: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff recorder.
///
/// Operations are appended in execution order, so the node list is already a
/// topological order; `backward` walks it once in reverse. Leaves may borrow
/// their tensors, which keeps frozen weights zero-copy.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
    /// Trainable leaves that borrow a tensor, keyed by its address.
    params: Vec<(usize, Var)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    by_tensor: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    /// Gradient with respect to a borrowed parameter tensor, summed over
    /// every leaf that registered it.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        self.by_tensor.get(&(t as *const Tensor as usize)).map(Vec::as_slice)
    }

    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn acc(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

pub(super) fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[usize],
    include: &[bool],
) -> Result<(usize, Vec<f32>, f32)> {
    let (t, v) = matrix("cross_entropy", logits)?;
    if targets.len() != t || include.len() != t {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: vec![t, v],
            rhs: vec![targets.len(), include.len()],
        });
    }
    let count = include.iter().filter(|b| **b).count();
    if count == 0 {
        return Err(Error::Contract("cross-entropy over an empty target set".into()));
    }
    let mut probs = vec![0.0f32; t * v];
    let mut total = 0.0f64;
    for r in 0..t {
        if !include[r] {
            continue;
        }
        let tgt = targets[r];
        if tgt >= v {
            return Err(Error::Range(format!("target id {tgt} outside vocabulary of {v}")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &x in row {
            sum += ((x - max) as f64).exp();
        }
        let lse = max as f64 + sum.ln();
        total += lse - row[tgt] as f64;
        let p = &mut probs[r * v..(r + 1) * v];
        for (pi, &x) in p.iter_mut().zip(row) {
            *pi = ((x as f64 - lse).exp()) as f32;
        }
    }
    Ok((count, probs, (total / count as f64) as f32))
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            params: Vec::new(),
        }
    }

    /// A tape that only evaluates; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            params: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            requires_grad,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        if requires_grad {
            self.params.push((t as *const Tensor as usize, v));
        }
        v
    }

    /// Non-trainable leaf borrowing its tensor.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owning its tensor.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            requires_grad: requires_grad && self.recording,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowing leaf whose trainability is decided at runtime.
    pub fn input(&mut self, t: &'a Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.frozen(t)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", ta)?;
        let (k2, n) = matrix("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, &[a, b], Op::MatMul { a, b }))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul_bt", ta)?;
        let (n, k2) = matrix("matmul_bt", tb)?;
        if k != k2 {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul_bt(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, &[a, b], Op::MatMulBt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Mul { a, b }))
    }

    /// Scales `x` by the single element of `g`.
    pub fn gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tg.numel() != 1 {
            return Err(dim_err("gate", tx, tg));
        }
        let s = tg.data()[0];
        let data = tx.data().iter().map(|v| s * v).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, g], Op::Gate { x, g }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| kernels::silu(*v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, &[x], Op::Silu { x })
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.numel() != tx.cols() {
            return Err(dim_err("rms_norm", tx, tw));
        }
        let (out, inv) = kernels::rms_norm(tx.data(), tw.data(), eps);
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, &[x, w], Op::RmsNorm { x, w, inv }))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = matrix("embedding", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!("index {id} outside table of {rows} rows")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, head_dim: usize, theta: f32) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = matrix("rope", tx)?;
        if rows != positions.len() || cols != n_heads * head_dim || !head_dim.is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "rope",
                lhs: tx.shape().to_vec(),
                rhs: vec![positions.len(), n_heads, head_dim],
            });
        }
        let mut data = tx.data().to_vec();
        kernels::rope_apply(&mut data, positions, n_heads, head_dim, theta, false);
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            out,
            &[x],
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
                head_dim,
                theta,
            },
        ))
    }

    /// Multi-head attention. `causal_offset` is the absolute position of
    /// the first query row when a causal mask applies.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        causal_offset: Option<usize>,
        dropout: Option<Vec<f32>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, width) = matrix("attention", tq)?;
        let (s, wk) = matrix("attention", tk)?;
        if wk != width || tv.shape() != tk.shape() || n_heads == 0 || width % n_heads != 0 {
            return Err(dim_err("attention", tq, tk));
        }
        let shape = AttnShape {
            q_rows: t,
            kv_rows: s,
            n_heads,
            head_dim: width / n_heads,
            causal_offset,
        };
        if let Some(d) = &dropout {
            if d.len() != n_heads * t * s {
                return Err(Error::Contract("dropout mask has wrong length".into()));
            }
        }
        let (out, probs) = kernels::attention(tq.data(), tk.data(), tv.data(), shape, dropout.as_deref());
        let out = Tensor::new(vec![t, width], out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
                dropout,
            },
        ))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, &[x], Op::Softmax { x })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let (count, probs, loss) = cross_entropy_forward(self.value(logits), targets, include)?;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Stacks matrices with equal column counts. Zero parts yield a
    /// `0 × cols` matrix only if `cols` can be inferred, so at least one
    /// part is required.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = matrix("concat_rows", tp)?;
            if c != cols {
                return Err(dim_err("concat_rows", self.value(first), tp));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, parts, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| *v as f64).sum();
        self.push(Tensor::scalar(s as f32), &[x], Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| (*v as f64).powi(2)).sum();
        self.push(Tensor::scalar(s as f32), &[x], Op::SumSquares { x })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                by_tensor: HashMap::new(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_backward(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_tensor: HashMap<usize, Vec<f32>> = HashMap::new();
        for (addr, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                match by_tensor.get_mut(addr) {
                    Some(total) => add_into(total, g),
                    None => {
                        by_tensor.insert(*addr, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, by_tensor })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_backward(&self, op: &Op, out: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let d = kernels::matmul_bt(g, tb.data(), m, n, k);
                    add_into(acc(&mut grads[a.0], m * k), &d);
                }
                if self.needs(*b) {
                    kernels::matmul_at_acc(ta.data(), g, m, k, n, acc(&mut grads[b.0], k * n));
                }
            }
            Op::MatMulBt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.needs(*a) {
                    // dA = G · B
                    kernels::matmul_acc(g, tb.data(), m, n, k, acc(&mut grads[a.0], m * k));
                }
                if self.needs(*b) {
                    // dB = Gᵀ · A
                    kernels::matmul_at_acc(g, ta.data(), m, n, k, acc(&mut grads[b.0], n * k));
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(acc(&mut grads[v.0], g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(&mut grads[b.0], g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Gate { x, g: gv } => {
                let (tx, tg) = (self.value(*x), self.value(*gv));
                let s = tg.data()[0];
                if self.needs(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += s * gi;
                    }
                }
                if self.needs(*gv) {
                    let d = kernels::dot(g, tx.data());
                    acc(&mut grads[gv.0], 1)[0] += d;
                }
            }
            Op::Silu { x } => {
                let tx = self.value(*x);
                let gx = acc(&mut grads[x.0], g.len());
                for ((o, gi), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    *o += gi * s * (1.0 + xv * (1.0 - s));
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = tw.numel();
                let rows = tx.numel() / d;
                if self.needs(*w) {
                    let gw = acc(&mut grads[w.0], d);
                    for r in 0..rows {
                        let xr = &tx.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gw[j] += gr[j] * xr[j] * inv[r];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = acc(&mut grads[x.0], tx.numel());
                    for r in 0..rows {
                        let xr = &tx.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let ir = inv[r];
                        // y = x·ir·w; dx = ir·(g∘w) − x·ir³/d·Σ(g∘w∘x)
                        let mut s = 0.0f32;
                        for j in 0..d {
                            s += gr[j] * tw.data()[j] * xr[j];
                        }
                        let c = ir * ir * ir * s / d as f32;
                        for j in 0..d {
                            gx[r * d + j] += ir * gr[j] * tw.data()[j] - c * xr[j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let gt = acc(&mut grads[table.0], tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Rope {
                x,
                positions,
                n_heads,
                head_dim,
                theta,
            } => {
                let mut d = g.to_vec();
                kernels::rope_apply(&mut d, positions, *n_heads, *head_dim, *theta, true);
                add_into(acc(&mut grads[x.0], d.len()), &d);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
                dropout,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = self.needs(*q).then(|| vec![0.0f32; tq.numel()]);
                let mut dk = self.needs(*k).then(|| vec![0.0f32; tk.numel()]);
                let mut dv = self.needs(*v).then(|| vec![0.0f32; tv.numel()]);
                kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    dropout.as_deref(),
                    *shape,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = d {
                        add_into(acc(&mut grads[var.0], d.len()), &d);
                    }
                }
            }
            Op::Softmax { x } => {
                let c = out.cols();
                let gx = acc(&mut grads[x.0], g.len());
                for ((yr, gr), o) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        o[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
                count,
            } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let scale = g[0] / *count as f32;
                let gl = acc(&mut grads[logits.0], tl.numel());
                for (r, &inc) in include.iter().enumerate() {
                    if !inc {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.needs(*p) {
                        add_into(acc(&mut grads[p.0], n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                for o in acc(&mut grads[x.0], n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::SumSquares { x } => {
                let tx = self.value(*x);
                let gx = acc(&mut grads[x.0], tx.numel());
                for (o, xv) in gx.iter_mut().zip(tx.data()) {
                    *o += 2.0 * xv * g[0];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::ones(&[2, 2]);
        let mut tape = Tape::new();
        let x = tape.param(&t);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_no_grad() {
        let t = Tensor::ones(&[2]);
        let mut tape = Tape::inference();
        let x = tape.param(&t);
        let y = tape.sum_squares(x);
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&t);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let a = Tensor::ones(&[2, 2]);
        let b = Tensor::ones(&[2, 2]);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vb = tape.frozen(&b);
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(va).is_some());
        assert!(g.get(vb).is_none());
    }
}
