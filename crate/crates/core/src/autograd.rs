//! Minimal reverse-mode autodiff tape.
//!
//! The model builds its forward pass as a DAG of tape nodes; `backward`
//! walks the nodes in reverse creation order and accumulates gradients for
//! every leaf marked trainable. Only the op set the transformer needs is
//! implemented. All arithmetic is f64.

use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    /// y = x . w^T
    Linear { x: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    /// Elementwise product with a constant mask (dropout).
    MulMask { a: NodeId, mask: Tensor },
    Silu { a: NodeId },
    /// Row-wise RMS normalization with a frozen gain vector.
    RmsNorm { a: NodeId, gain: Tensor, eps: f64 },
    /// Rotary position embedding over per-head (even, odd) pairs.
    Rope { a: NodeId, n_heads: usize },
    /// Masked softmax attention with grouped kv heads.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        n_kv_heads: usize,
        causal: bool,
        window: Option<usize>,
    },
    /// Vertical stack of row blocks.
    ConcatRows { parts: Vec<NodeId> },
    /// Mean token-level cross-entropy against integer targets.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore_id: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const ROPE_BASE: f64 = 10_000.0;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let value = matmul_nt(self.value(x), self.value(w)).expect("linear shape mismatch");
        let rg = self.needs_grad(&[x, w]);
        self.push(Op::Linear { x, w }, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b)).expect("add shape mismatch");
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Add { a, b }, value, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        let rg = self.needs_grad(&[a]);
        self.push(Op::Scale { a, factor }, value, rg)
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Tensor) -> NodeId {
        assert_eq!(self.value(a).shape(), mask.shape(), "mask shape mismatch");
        let value = Tensor::from_vec(
            mask.shape(),
            self.value(a)
                .data()
                .iter()
                .zip(mask.data())
                .map(|(x, m)| x * m)
                .collect(),
        )
        .expect("shapes checked");
        let rg = self.needs_grad(&[a]);
        self.push(Op::MulMask { a, mask }, value, rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.needs_grad(&[a]);
        self.push(Op::Silu { a }, value, rg)
    }

    pub fn rms_norm(&mut self, a: NodeId, gain: Tensor, eps: f64) -> NodeId {
        let value = rms_norm_forward(self.value(a), &gain, eps);
        let rg = self.needs_grad(&[a]);
        self.push(Op::RmsNorm { a, gain, eps }, value, rg)
    }

    pub fn rope(&mut self, a: NodeId, n_heads: usize) -> NodeId {
        let value = rope_apply(self.value(a), n_heads, 1.0);
        let rg = self.needs_grad(&[a]);
        self.push(Op::Rope { a, n_heads }, value, rg)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        n_kv_heads: usize,
        causal: bool,
        window: Option<usize>,
    ) -> NodeId {
        let value = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            n_heads,
            n_kv_heads,
            causal,
            window,
        );
        let rg = self.needs_grad(&[q, k, v]);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                n_kv_heads,
                causal,
                window,
            },
            value,
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat parts must share column count");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(&[rows, cols], data).expect("consistent parts");
        let rg = self.needs_grad(parts);
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Mean of -log softmax(logits)[target] over positions whose target is
    /// not `ignore_id`. Panics if every position is ignored; callers
    /// validate their batches first.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore_id: usize) -> NodeId {
        let (loss, _) = cross_entropy_forward(self.value(logits), targets, ignore_id)
            .expect("cross_entropy needs at least one supervised position");
        let value = Tensor::from_vec(&[1], vec![loss]).expect("scalar");
        let rg = self.needs_grad(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
            },
            value,
            rg,
        )
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node;
    /// slots without gradient flow stay `None`.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.nodes[loss].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(&[1], vec![1.0]).expect("scalar"));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Linear { x, w } => {
                    if self.nodes[*x].requires_grad {
                        let dx = matmul(&grad, self.value(*w)).expect("dx");
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let dw = matmul_tn(&grad, self.value(*x)).expect("dw");
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, grad.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, grad);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, grad.scale(*factor));
                    }
                }
                Op::MulMask { a, mask } => {
                    if self.nodes[*a].requires_grad {
                        let da = Tensor::from_vec(
                            mask.shape(),
                            grad.data()
                                .iter()
                                .zip(mask.data())
                                .map(|(g, m)| g * m)
                                .collect(),
                        )
                        .expect("shapes checked");
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Silu { a } => {
                    if self.nodes[*a].requires_grad {
                        let x = self.value(*a);
                        let da = Tensor::from_vec(
                            x.shape(),
                            x.data()
                                .iter()
                                .zip(grad.data())
                                .map(|(&xv, &g)| {
                                    let s = sigmoid(xv);
                                    g * s * (1.0 + xv * (1.0 - s))
                                })
                                .collect(),
                        )
                        .expect("same shape");
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::RmsNorm { a, gain, eps } => {
                    if self.nodes[*a].requires_grad {
                        let da = rms_norm_backward(self.value(*a), gain, *eps, &grad);
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Rope { a, n_heads } => {
                    if self.nodes[*a].requires_grad {
                        // The rotation is orthogonal; its transpose rotates by -theta.
                        let da = rope_apply(&grad, *n_heads, -1.0);
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    n_kv_heads,
                    causal,
                    window,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *n_heads,
                        *n_kv_heads,
                        *causal,
                        *window,
                        &grad,
                    );
                    if self.nodes[*q].requires_grad {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.nodes[*k].requires_grad {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.nodes[*v].requires_grad {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::ConcatRows { parts } => {
                    let cols = grad.cols();
                    let mut row = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.nodes[p].requires_grad {
                            let slice = grad.data()[row * cols..(row + rows) * cols].to_vec();
                            let dp = Tensor::from_vec(&[rows, cols], slice).expect("slice");
                            accumulate(&mut grads, p, dp);
                        }
                        row += rows;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_id,
                } => {
                    if self.nodes[*logits].requires_grad {
                        let upstream = grad.data()[0];
                        let (_, dlogits) =
                            cross_entropy_forward(self.value(*logits), targets, *ignore_id)
                                .expect("validated at construction");
                        accumulate(&mut grads, *logits, dlogits.scale(upstream));
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    grads[id] = Some(match grads[id].take() {
        Some(existing) => existing.add(&delta).expect("gradient shapes agree"),
        None => delta,
    });
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn rms_norm_forward(x: &Tensor, gain: &Tensor, eps: f64) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    assert_eq!(gain.numel(), cols, "gain length must match row width");
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = row[c] * gain.data()[c] * inv;
        }
    }
    Tensor::from_vec(&[rows, cols], out).expect("same shape")
}

fn rms_norm_backward(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let n = cols as f64;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
        let rms = (ms + eps).sqrt();
        let mut dot = 0.0;
        for c in 0..cols {
            dot += dyr[c] * gain.data()[c] * xr[c];
        }
        let coeff = dot / (n * rms * rms * rms);
        for c in 0..cols {
            out[r * cols + c] = dyr[c] * gain.data()[c] / rms - xr[c] * coeff;
        }
    }
    Tensor::from_vec(&[rows, cols], out).expect("same shape")
}

/// Apply rotary embeddings to `[T, n_heads * d_head]`; `direction` of -1
/// rotates by the negated angles (the Jacobian transpose).
pub(crate) fn rope_apply(x: &Tensor, n_heads: usize, direction: f64) -> Tensor {
    let (t_len, width) = (x.rows(), x.cols());
    assert_eq!(width % n_heads, 0);
    let d_head = width / n_heads;
    assert_eq!(d_head % 2, 0, "head dim must be even for rotary pairs");
    let mut out = x.data().to_vec();
    for t in 0..t_len {
        for h in 0..n_heads {
            let base = t * width + h * d_head;
            for p in 0..d_head / 2 {
                let angle =
                    direction * t as f64 * ROPE_BASE.powf(-2.0 * p as f64 / d_head as f64);
                let (sin, cos) = angle.sin_cos();
                let a = out[base + 2 * p];
                let b = out[base + 2 * p + 1];
                out[base + 2 * p] = a * cos - b * sin;
                out[base + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
    Tensor::from_vec(&[t_len, width], out).expect("same shape")
}

fn allowed(qpos: usize, kpos: usize, causal: bool, window: Option<usize>) -> bool {
    if causal && kpos > qpos {
        return false;
    }
    if let Some(w) = window {
        if qpos >= kpos && qpos - kpos >= w {
            return false;
        }
    }
    true
}

/// Per-head masked softmax scores for one query head against its kv head.
/// Returns the [T, T] probability matrix (forbidden entries are zero).
fn head_probs(
    q: &Tensor,
    k: &Tensor,
    h: usize,
    g: usize,
    d_head: usize,
    causal: bool,
    window: Option<usize>,
) -> Vec<f64> {
    let t_len = q.rows();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut probs = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        let qrow = &q.row(i)[h * d_head..(h + 1) * d_head];
        let mut row_max = f64::NEG_INFINITY;
        let mut scores = vec![f64::NEG_INFINITY; t_len];
        for (j, score) in scores.iter_mut().enumerate() {
            if !allowed(i, j, causal, window) {
                continue;
            }
            let krow = &k.row(j)[g * d_head..(g + 1) * d_head];
            let mut dot = 0.0;
            for (qa, ka) in qrow.iter().zip(krow) {
                dot += qa * ka;
            }
            *score = dot * scale;
            row_max = row_max.max(*score);
        }
        let mut denom = 0.0;
        for j in 0..t_len {
            if scores[j] > f64::NEG_INFINITY {
                let e = (scores[j] - row_max).exp();
                probs[i * t_len + j] = e;
                denom += e;
            }
        }
        for j in 0..t_len {
            probs[i * t_len + j] /= denom;
        }
    }
    probs
}

pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    n_kv_heads: usize,
    causal: bool,
    window: Option<usize>,
) -> Tensor {
    let t_len = q.rows();
    assert_eq!(k.rows(), t_len, "q/k sequence lengths differ");
    assert_eq!(v.rows(), t_len, "q/v sequence lengths differ");
    assert_eq!(q.cols() % n_heads, 0);
    assert_eq!(k.cols() % n_kv_heads, 0);
    assert_eq!(n_heads % n_kv_heads, 0, "kv heads must divide query heads");
    let d_head = q.cols() / n_heads;
    assert_eq!(k.cols() / n_kv_heads, d_head, "head dims differ");
    assert_eq!(v.cols(), k.cols(), "k/v widths differ");
    let groups = n_heads / n_kv_heads;

    let mut out = vec![0.0; t_len * q.cols()];
    for h in 0..n_heads {
        let g = h / groups;
        let probs = head_probs(q, k, h, g, d_head, causal, window);
        for i in 0..t_len {
            let out_row = &mut out[i * q.cols() + h * d_head..i * q.cols() + (h + 1) * d_head];
            for j in 0..t_len {
                let p = probs[i * t_len + j];
                if p == 0.0 {
                    continue;
                }
                let vrow = &v.row(j)[g * d_head..(g + 1) * d_head];
                for (o, &vv) in out_row.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    Tensor::from_vec(&[t_len, q.cols()], out).expect("same shape as q")
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    n_kv_heads: usize,
    causal: bool,
    window: Option<usize>,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let t_len = q.rows();
    let d_head = q.cols() / n_heads;
    let groups = n_heads / n_kv_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dv = vec![0.0; v.numel()];

    for h in 0..n_heads {
        let g = h / groups;
        let probs = head_probs(q, k, h, g, d_head, causal, window);
        for i in 0..t_len {
            let dout_row = &dout.row(i)[h * d_head..(h + 1) * d_head];
            // dP[i][j] = dout_row . v_j ; dS = P (dP - sum_j P dP)
            let mut dp = vec![0.0; t_len];
            let mut weighted = 0.0;
            for j in 0..t_len {
                let p = probs[i * t_len + j];
                if p == 0.0 {
                    continue;
                }
                let vrow = &v.row(j)[g * d_head..(g + 1) * d_head];
                let mut dot = 0.0;
                for (da, va) in dout_row.iter().zip(vrow) {
                    dot += da * va;
                }
                dp[j] = dot;
                weighted += p * dot;
            }
            let qrow = &q.row(i)[h * d_head..(h + 1) * d_head];
            for j in 0..t_len {
                let p = probs[i * t_len + j];
                if p == 0.0 {
                    continue;
                }
                // dV accumulation: P^T dOut
                let dv_row = &mut dv[j * v.cols() + g * d_head..j * v.cols() + (g + 1) * d_head];
                for (dvv, &da) in dv_row.iter_mut().zip(dout_row) {
                    *dvv += p * da;
                }
                let ds = p * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = &k.row(j)[g * d_head..(g + 1) * d_head];
                let dq_row = &mut dq[i * q.cols() + h * d_head..i * q.cols() + (h + 1) * d_head];
                for (dqv, &kv) in dq_row.iter_mut().zip(krow) {
                    *dqv += ds * kv;
                }
                let dk_row = &mut dk[j * k.cols() + g * d_head..j * k.cols() + (g + 1) * d_head];
                for (dkv, &qv) in dk_row.iter_mut().zip(qrow) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[t_len, q.cols()], dq).expect("dq"),
        Tensor::from_vec(&[t_len, k.cols()], dk).expect("dk"),
        Tensor::from_vec(&[t_len, v.cols()], dv).expect("dv"),
    )
}

/// Forward cross-entropy and the gradient w.r.t. logits (already divided by
/// the supervised-position count). Returns `None` if nothing is supervised.
pub(crate) fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[usize],
    ignore_id: usize,
) -> Option<(f64, Tensor)> {
    let (t_len, vocab) = (logits.rows(), logits.cols());
    assert_eq!(targets.len(), t_len, "one target per logit row");
    let counted = targets.iter().filter(|&&t| t != ignore_id).count();
    if counted == 0 {
        return None;
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.numel()];
    for (r, &target) in targets.iter().enumerate() {
        if target == ignore_id {
            continue;
        }
        assert!(target < vocab, "target id {target} out of vocabulary");
        let row = logits.row(r);
        let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &l in row {
            denom += (l - row_max).exp();
        }
        let log_z = row_max + denom.ln();
        loss += (log_z - row[target]) * inv;
        for (c, &l) in row.iter().enumerate() {
            let softmax = (l - row_max).exp() / denom;
            grad[r * vocab + c] = softmax * inv;
        }
        grad[r * vocab + target] -= inv;
    }
    Some((
        loss,
        Tensor::from_vec(&[t_len, vocab], grad).expect("same shape"),
    ))
}
