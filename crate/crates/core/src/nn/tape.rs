//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from the [`ParamStore`] instead of copying them, and
//! [`Tape::backward`] returns the gradients of every parameter that took
//! part in the pass. Nodes are appended in evaluation order, so walking the
//! tape backwards is a valid topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{dot, matmul_acc, matmul_at_acc, transpose};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    RepeatRows {
        x: usize,
        times: usize,
        cols: usize,
    },
    Attention(Box<AttentionRecord>),
    Sum(usize),
    Mean(usize),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct AttentionRecord {
    q: usize,
    k: usize,
    v: usize,
    shape: AttentionShape,
    probs: Vec<f64>,
}

#[derive(Clone, Copy)]
struct AttentionShape {
    batch: usize,
    heads: usize,
    t: usize,
    s: usize,
    dh: usize,
    causal: bool,
}

impl AttentionShape {
    fn width(&self) -> usize {
        self.heads * self.dh
    }

    fn limit(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.s
        }
    }

    fn prob_offset(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.t + i) * self.s
    }
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Tape<'a> {
    id: u64,
    store: &'a ParamStore,
    nodes: Vec<Node>,
    rng: Option<&'a mut ChaCha8Rng>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, other, &[0, 0])),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

impl<'a> Tape<'a> {
    /// A tape in training mode: dropout draws its masks from `rng`.
    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    /// A tape in evaluation mode: dropout is the identity.
    pub fn eval(store: &'a ParamStore) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn data_of(&self, idx: usize) -> &[f64] {
        match &self.nodes[idx].value {
            Value::Owned(d) => d,
            Value::Param(p) => self.store.get(*p).data(),
        }
    }

    fn grad_flag(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.data_of(self.idx(v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v)].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are consistent")
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = matrix_dims("matmul", &self.nodes[ai].shape)?;
        let (k2, n) = matrix_dims("matmul", &self.nodes[bi].shape)?;
        if k != k2 {
            return Err(shape_err("matmul", &self.nodes[ai].shape, &self.nodes[bi].shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data_of(ai), self.data_of(bi), &mut out, m, k, n);
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    /// `x[rows, in] * w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let (rows, inp) = matrix_dims("linear", &self.nodes[xi].shape)?;
        let (out, inp2) = matrix_dims("linear", &self.nodes[wi].shape)?;
        if inp != inp2 || self.nodes[bi].shape != [out] {
            return Err(shape_err("linear", &self.nodes[xi].shape, &self.nodes[wi].shape));
        }
        let wt = transpose(self.data_of(wi), out, inp);
        let bias = self.data_of(bi);
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        matmul_acc(self.data_of(xi), &wt, &mut y, rows, inp, out);
        let rg = self.grad_flag(&[xi, wi, bi]);
        Ok(self.push(
            vec![rows, out],
            y,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(op, &self.nodes[a].shape, &self.nodes[b].shape));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape("add", ai, bi)?;
        let out = self
            .data_of(ai)
            .iter()
            .zip(self.data_of(bi))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Add(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape("mul", ai, bi)?;
        let out = self
            .data_of(ai)
            .iter()
            .zip(self.data_of(bi))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ai = self.idx(a);
        let out = self.data_of(ai).iter().map(|x| x * c).collect();
        let rg = self.grad_flag(&[ai]);
        self.push(self.nodes[ai].shape.clone(), out, Op::Scale(ai, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let out = self.data_of(ai).iter().map(|x| x.max(0.0)).collect();
        let rg = self.grad_flag(&[ai]);
        self.push(self.nodes[ai].shape.clone(), out, Op::Relu(ai), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let out = self.data_of(ai).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.grad_flag(&[ai]);
        self.push(self.nodes[ai].shape.clone(), out, Op::Sigmoid(ai), rg)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let ai = self.idx(a);
        let Some(rng) = self.rng.as_deref_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[ai].shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data_of(ai).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.grad_flag(&[ai]);
        self.push(self.nodes[ai].shape.clone(), out, Op::Dropout { x: ai, mask }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let cols = *self.nodes[ai]
            .shape
            .last()
            .ok_or_else(|| shape_err("softmax", &[], &[1]))?;
        let mut out = self.data_of(ai).to_vec();
        if cols > 0 {
            out.chunks_mut(cols).for_each(softmax_in_place);
        }
        let rg = self.grad_flag(&[ai]);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Softmax { x: ai, cols }, rg))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (rows, cols) = matrix_dims("layer_norm", &self.nodes[xi].shape)?;
        if self.nodes[gi].shape != [cols] || self.nodes[bi].shape != [cols] {
            return Err(shape_err("layer_norm", &self.nodes[xi].shape, &self.nodes[gi].shape));
        }
        let (xs, g, b) = (self.data_of(xi), self.data_of(gi), self.data_of(bi));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let rg = self.grad_flag(&[xi, gi, bi]);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let (vocab, dim) = matrix_dims("embedding", &self.nodes[ti].shape)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err("embedding", &[vocab, dim], &[bad]));
        }
        let data = self.data_of(ti);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        let rg = self.grad_flag(&[ti]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// `[b, d] -> [b * times, d]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (rows, cols) = matrix_dims("repeat_rows", &self.nodes[xi].shape)?;
        let data = self.data_of(xi);
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(vec![rows * times, cols], out, Op::RepeatRows { x: xi, times, cols }, rg))
    }

    /// Scaled dot-product attention with `heads` heads.
    ///
    /// `q` is `[batch * t, d]`, `k` and `v` are `[batch * s, d]`; rows of one
    /// batch item are contiguous. With `causal`, query `i` attends only to
    /// keys `0..=i` (requires `t == s`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, causal: bool) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let (qr, d) = matrix_dims("attention", &self.nodes[qi].shape)?;
        let (kr, dk) = matrix_dims("attention", &self.nodes[ki].shape)?;
        if self.nodes[ki].shape != self.nodes[vi].shape
            || dk != d
            || batch == 0
            || heads == 0
            || d % heads != 0
            || qr % batch != 0
            || kr % batch != 0
        {
            return Err(shape_err("attention", &self.nodes[qi].shape, &self.nodes[ki].shape));
        }
        let shape = AttentionShape {
            batch,
            heads,
            t: qr / batch,
            s: kr / batch,
            dh: d / heads,
            causal,
        };
        if causal && shape.t != shape.s {
            return Err(shape_err(
                "causal attention",
                &self.nodes[qi].shape,
                &self.nodes[ki].shape,
            ));
        }
        let (qd, kd, vd) = (self.data_of(qi), self.data_of(ki), self.data_of(vi));
        let scale = 1.0 / (shape.dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * shape.t * shape.s];
        let mut out = vec![0.0; qr * d];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * shape.dh..(h + 1) * shape.dh;
                for i in 0..shape.t {
                    let qrow = &qd[(b * shape.t + i) * d..][cols.clone()];
                    let limit = shape.limit(i);
                    let p = &mut probs[shape.prob_offset(b, h, i)..][..limit];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(b * shape.s + j) * d..][cols.clone()];
                        *pj = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(b * shape.t + i) * d..][cols.clone()];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vd[(b * shape.s + j) * d..][cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.grad_flag(&[qi, ki, vi]);
        Ok(self.push(
            vec![qr, d],
            out,
            Op::Attention(Box::new(AttentionRecord {
                q: qi,
                k: ki,
                v: vi,
                shape,
                probs,
            })),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.data_of(ai).iter().sum();
        let rg = self.grad_flag(&[ai]);
        self.push(vec![], vec![s], Op::Sum(ai), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let n = self.data_of(ai).len();
        if n == 0 {
            return Err(Error::Empty("tensor"));
        }
        let s = self.data_of(ai).iter().sum::<f64>() / n as f64;
        let rg = self.grad_flag(&[ai]);
        Ok(self.push(vec![], vec![s], Op::Mean(ai), rg))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let li = self.idx(logits);
        let z = self.data_of(li);
        if z.len() != targets.len() || z.is_empty() {
            return Err(shape_err("bce_with_logits", &self.nodes[li].shape, &[targets.len()]));
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.grad_flag(&[li]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                logits: li,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean token cross-entropy over the rows where `active` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let li = self.idx(logits);
        let (rows, vocab) = matrix_dims("cross_entropy", &self.nodes[li].shape)?;
        if targets.len() != rows || active.len() != rows || targets.iter().any(|&t| t >= vocab) {
            return Err(shape_err("cross_entropy", &self.nodes[li].shape, &[targets.len()]));
        }
        let count = active.iter().filter(|a| **a).count();
        if count == 0 {
            return Err(Error::Empty("cross-entropy target set"));
        }
        let z = self.data_of(li);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| active[r]) {
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(&z[r * vocab..(r + 1) * vocab]);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - p[targets[r]];
            softmax_in_place(p);
        }
        let rg = self.grad_flag(&[li]);
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::DetachedGraph("loss was recorded on a different tape"));
        }
        let root = &self.nodes[loss.idx];
        if root.shape.iter().product::<usize>() != 1 {
            return Err(shape_err("backward", &root.shape, &[]));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph("loss does not depend on any parameter"));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => match out.iter_mut().find(|(id, _)| id == p) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    None => out.push((*p, g)),
                },
                Op::MatMul { a, b, m, k, n } => {
                    if self.nodes[*a].requires_grad {
                        let bt = transpose(self.data_of(*b), *k, *n);
                        let mut da = vec![0.0; m * k];
                        matmul_acc(&g, &bt, &mut da, *m, *n, *k);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_at_acc(self.data_of(*a), &g, &mut db, *m, *k, *n);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    inp,
                    out: o,
                } => {
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![0.0; rows * inp];
                        matmul_acc(&g, self.data_of(*w), &mut dx, *rows, *o, *inp);
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let mut dw = vec![0.0; o * inp];
                        matmul_at_acc(&g, self.data_of(*x), &mut dw, *rows, *o, *inp);
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; *o];
                        for row in g.chunks(*o) {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data_of(*a), self.data_of(*b));
                    let da = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, *a, g.iter().map(|x| x * c).collect());
                }
                Op::Relu(a) => {
                    let x = self.data_of(*a);
                    let da = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    self.acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = self.data_of(i);
                    let da = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.acc(&mut grads, *a, da);
                }
                Op::Dropout { x, mask } => {
                    self.acc(&mut grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::Softmax { x, cols } => {
                    let y = self.data_of(i);
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                        let s = dot(gr, yr);
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - s);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cols,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.data_of(*gamma);
                    let n = *cols as f64;
                    let mut dgamma = vec![0.0; *cols];
                    let mut dbeta = vec![0.0; *cols];
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks(*cols).zip(xhat.chunks(*cols)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..*cols {
                            dgamma[c] += gr[c] * hr[c];
                            dbeta[c] += gr[c];
                            let dh = gr[c] * gam[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..*cols {
                            let dh = gr[c] * gam[c];
                            dx[r * cols + c] = inv / n * (n * dh - sum_d - hr[c] * sum_dh);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *gamma, dgamma);
                    self.acc(&mut grads, *beta, dbeta);
                }
                Op::Embedding { table, ids, dim } => {
                    let mut dt = vec![0.0; self.data_of(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x);
                    }
                    self.acc(&mut grads, *table, dt);
                }
                Op::RepeatRows { x, times, cols } => {
                    let rows = g.len() / (times * cols);
                    let mut dx = vec![0.0; rows * cols];
                    for (r, block) in g.chunks(times * cols).enumerate() {
                        for rep in block.chunks(*cols) {
                            dx[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(rep)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention(rec) => self.attention_backward(&mut grads, rec, &g),
                Op::Sum(a) => {
                    let n = self.data_of(*a).len();
                    self.acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.data_of(*a).len();
                    self.acc(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.data_of(*logits);
                    let n = z.len() as f64;
                    let dz = z
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                        .collect();
                    self.acc(&mut grads, *logits, dz);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    active,
                    probs,
                    count,
                } => {
                    let vocab = probs.len() / targets.len();
                    let scale = g[0] / *count as f64;
                    let mut dz = vec![0.0; probs.len()];
                    for r in (0..targets.len()).filter(|&r| active[r]) {
                        let row = &mut dz[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d = scale * p;
                        }
                        row[targets[r]] -= scale;
                    }
                    self.acc(&mut grads, *logits, dz);
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients(out))
    }

    fn attention_backward(&self, grads: &mut [Option<Vec<f64>>], rec: &AttentionRecord, g: &[f64]) {
        let sh = rec.shape;
        let d = sh.width();
        let (qd, kd, vd) = (self.data_of(rec.q), self.data_of(rec.k), self.data_of(rec.v));
        let scale = 1.0 / (sh.dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; sh.s];
        for b in 0..sh.batch {
            for h in 0..sh.heads {
                let cols = h * sh.dh..(h + 1) * sh.dh;
                for i in 0..sh.t {
                    let limit = sh.limit(i);
                    let p = &rec.probs[sh.prob_offset(b, h, i)..][..limit];
                    let qrow_at = (b * sh.t + i) * d;
                    let grow = &g[qrow_at..][cols.clone()];
                    for j in 0..limit {
                        let vrow_at = (b * sh.s + j) * d;
                        dp[j] = dot(grow, &vd[vrow_at..][cols.clone()]);
                        for (dvx, gx) in dv[vrow_at..][cols.clone()].iter_mut().zip(grow) {
                            *dvx += p[j] * gx;
                        }
                    }
                    let weighted: f64 = p.iter().zip(&dp[..limit]).map(|(p, d)| p * d).sum();
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow_at = (b * sh.s + j) * d;
                        for c in cols.clone() {
                            dq[qrow_at + c] += ds * kd[krow_at + c];
                            dk[krow_at + c] += ds * qd[qrow_at + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, rec.q, dq);
        self.acc(grads, rec.k, dk);
        self.acc(grads, rec.v, dv);
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values.iter().map(|(n, t)| store.add(*n, t.clone())).collect();
        (store, ids)
    }

    #[test]
    fn relu_and_softmax_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let c = tape.constant(Tensor::new(vec![1, 4], vec![3.3; 4]).unwrap());
        let s = tape.softmax(c).unwrap();
        for &p in tape.value(s) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let (store, ids) = store_with(&[("w", w.clone())]);
        let mut tape = Tape::eval(&store);
        let wv = tape.param(ids[0]);
        let loss = tape.sum(wv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[1.0; 4]);

        let mut tape = Tape::eval(&store);
        let wv = tape.param(ids[0]);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), w.data());
    }

    #[test]
    fn backward_rejects_detached_and_non_scalar() {
        let (store, ids) = store_with(&[("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::eval(&store);
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::DetachedGraph(_))));
        let w = tape.param(ids[0]);
        assert!(matches!(tape.backward(w), Err(Error::ShapeMismatch { .. })));

        let mut other = Tape::eval(&store);
        let w2 = other.param(ids[0]);
        let foreign = other.sum(w2);
        assert!(matches!(tape.backward(foreign), Err(Error::DetachedGraph(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let x = Tensor::new(vec![1, 1000], vec![1.0; 1000]).unwrap();

        let mut tape = Tape::eval(&store);
        let v = tape.constant(x.clone());
        let y = tape.dropout(v, 0.3);
        assert_eq!(y, v);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::train(&store, &mut rng);
        let v = tape.constant(x.clone());
        assert_eq!(tape.dropout(v, 0.0), v);
        let y = tape.dropout(v, 0.3);
        let vals = tape.value(y);
        let kept = vals.iter().filter(|&&x| x != 0.0).count();
        assert!(vals.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.7).abs() < 1e-12));
        assert!((600..800).contains(&kept), "kept {kept}");
    }

    #[test]
    fn one_hot_attention_hand_computed() {
        // q = k = v = I_2, one head, d = 2: scores = I / sqrt(2)
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = tape.constant(eye.clone());
        let out = tape.attention(q, q, q, 1, 1, false).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 / (s.exp() + 1.0);
        let expect = [hi, lo, lo, hi];
        for (a, b) in tape.value(out).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        // causal: the first query sees only the first key
        let causal = tape.attention(q, q, q, 1, 1, true).unwrap();
        let v = tape.value(causal);
        assert_eq!(&v[..2], &[1.0, 0.0]);
        assert!((v[2] - lo).abs() < 1e-15 && (v[3] - hi).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut tape = Tape::eval(&store);
        let x =
            tape.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 1.7).sin() * 30.0).collect()).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let (store, ids) = store_with(&[("z", Tensor::zeros(vec![3, 7]))]);
        let mut tape = Tape::eval(&store);
        let z = tape.param(ids[0]);
        let loss = tape.cross_entropy(z, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((tape.scalar(loss) - 7f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // inactive row receives no gradient
        assert!(grads.get(ids[0]).unwrap()[7..14].iter().all(|&g| g == 0.0));
    }
}
