//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. Only the handful of ops
//! the toy transformer and the distillation losses need are provided; the
//! attention, normalization and loss ops are fused with hand-written
//! vector-Jacobian products.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::prob::PROB_FLOOR;
use crate::tensor::{gemm, MatLayout, Tensor};

/// Handle to a node on a [`Graph`].
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
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu { x: Var },
    Rope { x: Var, n_heads: usize, base: f64 },
    CausalAttention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    SequenceKl { logits: Var, teacher: Vec<f64>, steps: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, steps: Vec<usize> },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Parameters may be borrowed (`'a`) to avoid copies.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep
/// their buffers after the sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf, used to bind model parameters without copying.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            MatLayout::row_major(k),
            bv.data(),
            MatLayout::row_major(n),
            &mut out,
            MatLayout::row_major(n),
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(value), Op::Scale { x, factor }, rg)
    }

    /// Row gather from a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { token: id, vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Cow::Owned(value),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise RMS normalization with a learned per-feature gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (t, d) = (xv.rows(), xv.cols());
        if gv.numel() != d {
            return Err(shape_err(format!("rms_norm gain {} vs width {d}", gv.numel())));
        }
        let mut out = vec![0.0; t * d];
        let mut inv_rms = Vec::with_capacity(t);
        for r in 0..t {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                out[r * d + c] = row[c] * inv * gv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Cow::Owned(value), Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(value), Op::Gelu { x }, rg)
    }

    /// Rotary position encoding applied per head to a `T×d` matrix, pairing
    /// features `(2p, 2p+1)` and rotating row `t` by `t·base^(-2p/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = (xv.rows(), xv.cols());
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(shape_err(format!("rope width {d} with {n_heads} heads")));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, t, d, n_heads, base, false);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(value), Op::Rope { x, n_heads, base }, rg))
    }

    /// Multi-head scaled dot-product attention with a causal mask. Inputs are
    /// `T×d` projections; heads occupy contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        if n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err(format!("attention width {d} with {n_heads} heads")));
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..n_heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                hd,
                t,
                qv.data(),
                MatLayout::row_major(d).at(h * hd),
                kv.data(),
                MatLayout::transposed(d).at(h * hd),
                p,
                MatLayout::row_major(t),
                false,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= z;
                }
                for s in row[i + 1..].iter_mut() {
                    *s = 0.0;
                }
            }
            gemm(
                t,
                t,
                hd,
                p,
                MatLayout::row_major(t),
                vv.data(),
                MatLayout::row_major(d).at(h * hd),
                &mut out,
                MatLayout::row_major(d).at(h * hd),
                false,
            );
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(value),
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities recorded by a [`Graph::causal_attention`]
    /// node, laid out `[head][query][key]`.
    pub fn attention_probs(&self, var: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[var.0].op {
            Op::CausalAttention { probs, n_heads, .. } => Some((probs, *n_heads)),
            _ => None,
        }
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t {
                return Err(shape_err(format!("row {r} of {t}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Cow::Owned(value),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            softmax_into(xv.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(value), Op::Softmax { x }, rg)
    }

    /// Row-wise log-softmax over the trailing dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            let row = xv.row(r);
            let lse = log_sum_exp(row);
            for (o, z) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = z - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(value), Op::LogSoftmax { x }, rg)
    }

    /// Mean over masked steps of `KL(teacher_t ‖ softmax(student_t))`.
    ///
    /// `teacher_logits` is a constant (no gradient flows into it). Teacher
    /// zeros follow `0·ln 0 = 0`; the student probability is floored at
    /// [`PROB_FLOOR`] inside the logarithm.
    pub fn sequence_kl(
        &mut self,
        student_logits: Var,
        teacher_logits: &Tensor,
        mask: &[bool],
    ) -> Result<Var> {
        let sv = self.value(student_logits);
        if sv.shape() != teacher_logits.shape() {
            return Err(shape_err(format!(
                "sequence_kl teacher {:?} vs student {:?}",
                teacher_logits.shape(),
                sv.shape()
            )));
        }
        let (t, c) = (sv.rows(), sv.cols());
        if mask.len() != t {
            return Err(shape_err(format!("mask of {} for {t} steps", mask.len())));
        }
        let steps: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if steps.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let mut teacher = vec![0.0; t * c];
        for r in 0..t {
            softmax_into(teacher_logits.row(r), &mut teacher[r * c..(r + 1) * c]);
        }
        let ln_floor = PROB_FLOOR.ln();
        let mut total = 0.0;
        for &r in &steps {
            let z = sv.row(r);
            let lse = log_sum_exp(z);
            let p = &teacher[r * c..(r + 1) * c];
            for w in 0..c {
                if p[w] > 0.0 {
                    let log_q = (z[w] - lse).max(ln_floor);
                    total += p[w] * (p[w].ln() - log_q);
                }
            }
        }
        let value = Tensor::scalar(total / steps.len() as f64);
        let rg = self.rg(&[student_logits]);
        Ok(self.push(
            Cow::Owned(value),
            Op::SequenceKl {
                logits: student_logits,
                teacher,
                steps,
            },
            rg,
        ))
    }

    /// Mean over masked steps of `-ln softmax(logits_t)[target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, c) = (lv.rows(), lv.cols());
        if targets.len() != t || mask.len() != t {
            return Err(shape_err(format!(
                "cross_entropy {} targets / {} mask for {t} steps",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                token: bad,
                vocab: c,
            });
        }
        let steps: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if steps.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let total: f64 = steps
            .iter()
            .map(|&r| {
                let z = lv.row(r);
                log_sum_exp(z) - z[targets[r]]
            })
            .sum();
        let value = Tensor::scalar(total / steps.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Cow::Owned(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                steps,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum { x }, rg)
    }

    /// `Σ w_i · x_i` over scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(shape_err(format!("weighted_sum term {:?}", val.shape())));
            }
            total += w * val.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(total)),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        MatLayout::row_major(n),
                        bv.data(),
                        MatLayout::transposed(n),
                        ga,
                        MatLayout::row_major(k),
                        true,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        MatLayout::transposed(k),
                        g,
                        MatLayout::row_major(n),
                        gb,
                        MatLayout::row_major(n),
                        true,
                    );
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).data());
                let (t, d) = (xv.rows(), xv.cols());
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..t {
                        let row = xv.row(r);
                        for c in 0..d {
                            gg[c] += g[r * d + c] * row[c] * inv_rms[r];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..t {
                        let row = xv.row(r);
                        let inv = inv_rms[r];
                        let mut dot = 0.0;
                        for c in 0..d {
                            dot += g[r * d + c] * gv[c] * row[c] * inv;
                        }
                        let mean = dot / d as f64;
                        for c in 0..d {
                            let u = g[r * d + c] * gv[c];
                            gx[r * d + c] += inv * (u - row[c] * inv * mean);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * dth);
                    }
                }
            }
            Op::Rope { x, n_heads, base } => {
                let xv = self.value(*x);
                let (t, d) = (xv.rows(), xv.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    let mut back = g.to_vec();
                    rotate(&mut back, t, d, *n_heads, *base, true);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *n_heads, probs, g, grads),
            Op::SelectRows { x, rows } => {
                let d = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        gx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.as_ref();
                let (t, c) = (y.rows(), y.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..t {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = node.value.as_ref();
                let (t, c) = (y.rows(), y.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..t {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::SequenceKl {
                logits,
                teacher,
                steps,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let ln_floor = PROB_FLOOR.ln();
                let upstream = g[0] / steps.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for &r in steps {
                        let z = lv.row(r);
                        let lse = log_sum_exp(z);
                        let p = &teacher[r * c..(r + 1) * c];
                        // d/dz of -Σ p_w · max(ln q_w, ln floor)
                        let mut active_mass = 0.0;
                        for w in 0..c {
                            if p[w] > 0.0 && z[w] - lse >= ln_floor {
                                active_mass += p[w];
                            }
                        }
                        for w in 0..c {
                            let q = (z[w] - lse).exp();
                            let active = p[w] > 0.0 && z[w] - lse >= ln_floor;
                            let pw = if active { p[w] } else { 0.0 };
                            gl[r * c + w] += upstream * (q * active_mass - pw);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                steps,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let upstream = g[0] / steps.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for &r in steps {
                        let z = lv.row(r);
                        let lse = log_sum_exp(z);
                        for w in 0..c {
                            gl[r * c + w] += upstream * (z[w] - lse).exp();
                        }
                        gl[r * c + targets[r]] -= upstream;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if let Some(gv) = self.slot(grads, v) {
                        gv[0] += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ds = vec![0.0; t * t];
        for h in 0..n_heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let col = MatLayout::row_major(d).at(h * hd);
            if let Some(gv) = self.slot(grads, v) {
                gemm(
                    t,
                    t,
                    hd,
                    p,
                    MatLayout::transposed(t),
                    g,
                    col,
                    gv,
                    col,
                    true,
                );
            }
            let need_scores = self.requires_grad(q) || self.requires_grad(k);
            if !need_scores {
                continue;
            }
            // dP = dO_h · V_hᵀ
            gemm(
                t,
                hd,
                t,
                g,
                col,
                vv.data(),
                MatLayout::transposed(d).at(h * hd),
                &mut ds,
                MatLayout::row_major(t),
                false,
            );
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut ds[i * t..(i + 1) * t];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                for x in dr[i + 1..].iter_mut() {
                    *x = 0.0;
                }
            }
            if let Some(gq) = self.slot(grads, q) {
                gemm(
                    t,
                    t,
                    hd,
                    &ds,
                    MatLayout::row_major(t),
                    kv.data(),
                    col,
                    gq,
                    col,
                    true,
                );
            }
            if let Some(gk) = self.slot(grads, k) {
                gemm(
                    t,
                    t,
                    hd,
                    &ds,
                    MatLayout::transposed(t),
                    qv.data(),
                    col,
                    gk,
                    col,
                    true,
                );
            }
        }
    }
}

/// Rotates `(2p, 2p+1)` feature pairs of each head; `inverse` applies the
/// transpose rotation (used for the backward pass).
fn rotate(data: &mut [f64], t: usize, d: usize, n_heads: usize, base: f64, inverse: bool) {
    let hd = d / n_heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / hd as f64))
        .collect();
    for pos in 0..t {
        for (p, f) in freqs.iter().enumerate() {
            let theta = pos as f64 * f;
            let (s, c) = theta.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..n_heads {
                let i = pos * d + h * hd + 2 * p;
                let (x0, x1) = (data[i], data[i + 1]);
                data[i] = x0 * c - x1 * s;
                data[i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
