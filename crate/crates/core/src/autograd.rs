//! Tape-based reverse-mode differentiation over 2D tensors.
//!
//! Every op records its inputs and whatever forward state the backward pass
//! needs. Losses are fused ops that produce a `1 x 1` tensor and carry their
//! component statistics in `aux`.

use std::cell::Cell;
use std::sync::Arc;

use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruptions used to prove the checkers catch bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    DiceGradSign,
    FocalGradSign,
    GramGradSign,
    CrossEntropyGradSign,
}

thread_local! {
    static FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Runs `f` with `fault` injected into backward passes on this thread.
pub fn with_fault<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            FAULT.with(|c| c.set(None));
        }
    }
    FAULT.with(|c| c.set(Some(fault)));
    let _reset = Reset;
    f()
}

fn fault_sign<S: Scalar>(which: Fault) -> S {
    if FAULT.with(|c| c.get()) == Some(which) {
        -S::one()
    } else {
        S::one()
    }
}

/// Per-sample attention segments of a packed sequence. Rows outside every
/// segment are not allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub start: usize,
    pub len: usize,
    /// Row-major `len x len`; `mask[i * len + j]` lets row `i` see `j`.
    pub mask: Vec<bool>,
}

impl AttnLayout {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.start + s.len).max().unwrap_or(0)
    }
}

/// Neighborhood table for windowed pixel-to-patch attention.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTable {
    pub window: usize,
    /// `n_query x window` key indices; `u32::MAX` marks an empty slot.
    pub neighbors: Vec<u32>,
    /// Row of the bias table used by each query.
    pub bias_row: Vec<u32>,
}

/// Sparse linear map stored by output row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMap {
    pub n_in: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossParams {
    pub alpha_dice: f64,
    pub beta_focal: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub smooth: f64,
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    RmsNorm { x: Var, g: Var, inv: Vec<S> },
    RowNormalize { x: Var, inv: Vec<S> },
    Rope { x: Var, cos: Arc<Vec<S>>, sin: Arc<Vec<S>>, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttnLayout>, probs: Vec<Vec<S>> },
    LocalAttn { q: Var, k: Var, v: Var, bias: Var, table: Arc<LocalTable>, probs: Vec<S> },
    Gather { a: Var, idx: Arc<Vec<u32>> },
    Concat(Vec<Var>),
    Reshape(Var),
    Resample { a: Var, map: Arc<SparseMap> },
    CrossEntropy { logits: Var, targets: Arc<Vec<Option<u32>>>, norm: S, probs: Vec<S> },
    SegLoss { logits: Var, targets: Arc<Vec<u8>>, p: SegLossParams, norm: S },
    Gram { f: Var, target: Arc<Tensor<S>>, weight: Arc<Vec<S>>, norm: S },
    WeightedSum(Vec<(Var, S)>),
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    needs_grad: bool,
    op: Op<S>,
    aux: Vec<f64>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `log(1 + e^x)` without overflow.
fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, grad: None, needs_grad, op, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, grad: None, needs_grad: true, op: Op::Leaf, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, grad: None, needs_grad: false, op: Op::Leaf, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn aux(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].aux
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias shape");
        let b = self.value(bias).data.clone();
        let mut out = self.value(a).clone();
        for row in out.data.chunks_mut(cols) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let out = Tensor::from_vec(va.rows, va.cols, va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect());
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = S::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = S::lit(GELU_C);
        let k = S::lit(GELU_K);
        let half = S::lit(0.5);
        let out = self.value(a).map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise RMS normalization with a `1 x cols` gain.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(g), (1, cols), "rms gain shape");
        let gain = self.value(g).data.clone();
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<S>() / S::lit(cols as f64);
            let ir = S::one() / (ms + S::lit(eps)).sqrt();
            inv.push(ir);
            for ((o, &v), &gg) in out.row_mut(r).iter_mut().zip(row).zip(&gain) {
                *o = v * ir * gg;
            }
        }
        self.push(out, Op::RmsNorm { x, g, inv }, &[x, g])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(S::lit(1e-12));
            let i = S::one() / n;
            inv.push(i);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v * i;
            }
        }
        self.push(out, Op::RowNormalize { x, inv }, &[x])
    }

    /// Rotates interleaved pairs of every head by per-row angles. `cos` and
    /// `sin` are `rows x head_dim/2`, shared by all heads.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<S>>, sin: Arc<Vec<S>>, head_dim: usize) -> Var {
        let (rows, cols) = self.shape(x);
        let half = head_dim / 2;
        assert_eq!(cols % head_dim, 0, "rope width");
        assert_eq!(cos.len(), rows * half, "rope table");
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            let src = xv.row(r);
            let dst = out.row_mut(r);
            for h in 0..cols / head_dim {
                let base = h * head_dim;
                for p in 0..half {
                    let (x0, x1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    dst[base + 2 * p] = x0 * c[p] - x1 * s[p];
                    dst[base + 2 * p + 1] = x0 * s[p] + x1 * c[p];
                }
            }
        }
        self.push(out, Op::Rope { x, cos, sin, head_dim }, &[x])
    }

    /// Masked multi-head softmax attention over packed segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttnLayout>) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let scale = S::lit(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut out = Tensor::zeros(rows, d);
        let mut probs = Vec::with_capacity(layout.segments.len() * heads);
        for seg in &layout.segments {
            let n = seg.len;
            for h in 0..heads {
                let off = seg.start * d + h * hd;
                let mut p = vec![S::zero(); n * n];
                S::gemm(n, hd, n, scale, &qv.data[off..], d, 1, &kv.data[off..], 1, d, S::zero(), &mut p, n, 1);
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let m = &seg.mask[i * n..(i + 1) * n];
                    let mut mx = S::neg_infinity();
                    for j in 0..n {
                        if m[j] && row[j] > mx {
                            mx = row[j];
                        }
                    }
                    let mut sum = S::zero();
                    for j in 0..n {
                        row[j] = if m[j] { (row[j] - mx).exp() } else { S::zero() };
                        sum += row[j];
                    }
                    let inv = S::one() / sum;
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
                S::gemm(n, n, hd, S::one(), &p, n, 1, &vv.data[off..], d, 1, S::zero(), &mut out.data[off..], d, 1);
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, layout, probs }, &[q, k, v])
    }

    /// Single-head attention where each query sees a fixed window of keys,
    /// plus a learned bias per (bias row, window slot).
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, bias: Var, table: Arc<LocalTable>) -> Var {
        let (nq, dk) = self.shape(q);
        let (_, dv) = self.shape(v);
        let w = table.window;
        assert_eq!(self.shape(bias).1, w, "bias width");
        assert_eq!(table.neighbors.len(), nq * w);
        let scale = S::lit(1.0 / (dk as f64).sqrt());
        let (qv, kv, vv, bv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            &self.nodes[bias.0].value,
        );
        let mut out = Tensor::zeros(nq, dv);
        let mut probs = vec![S::zero(); nq * w];
        let mut logit = vec![S::zero(); w];
        for p in 0..nq {
            let nb = &table.neighbors[p * w..(p + 1) * w];
            let brow = bv.row(table.bias_row[p] as usize);
            let qr = qv.row(p);
            let mut mx = S::neg_infinity();
            for s in 0..w {
                if nb[s] == u32::MAX {
                    continue;
                }
                let kr = kv.row(nb[s] as usize);
                let dot: S = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum();
                logit[s] = dot * scale + brow[s];
                mx = mx.max(logit[s]);
            }
            let pr = &mut probs[p * w..(p + 1) * w];
            let mut sum = S::zero();
            for s in 0..w {
                pr[s] = if nb[s] == u32::MAX { S::zero() } else { (logit[s] - mx).exp() };
                sum += pr[s];
            }
            let orow = out.row_mut(p);
            for s in 0..w {
                pr[s] /= sum;
                if nb[s] != u32::MAX {
                    for (o, &x) in orow.iter_mut().zip(vv.row(nb[s] as usize)) {
                        *o += pr[s] * x;
                    }
                }
            }
        }
        self.push(out, Op::LocalAttn { q, k, v, bias, table, probs }, &[q, k, v, bias])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Var {
        let av = self.value(a);
        let cols = av.cols;
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i as usize));
        }
        self.push(out, Op::Gather { a, idx }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, Arc::new((start as u32..(start + len) as u32).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat width");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// `out[:, o] = sum_i map[o][i] * a[:, i]`.
    pub fn resample(&mut self, a: Var, map: Arc<SparseMap>) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, map.n_in, "resample input width");
        let m = map.rows.len();
        let mut out = Tensor::zeros(av.rows, m);
        for r in 0..av.rows {
            let src = av.row(r);
            let dst = out.row_mut(r);
            for (o, entries) in map.rows.iter().enumerate() {
                let mut acc = S::zero();
                for &(i, w) in entries {
                    acc += src[i as usize] * S::lit(w);
                }
                dst[o] = acc;
            }
        }
        self.push(out, Op::Resample { a, map }, &[a])
    }

    /// `sum_i CE(logits_i, target_i) / norm` over rows with a target.
    /// `aux = [sum CE, supervised rows]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<Option<u32>>>, norm: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let cols = lv.cols;
        let mut probs = vec![S::zero(); lv.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            let pr = &mut probs[r * cols..(r + 1) * cols];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            total += (sum.ln() + mx - row[t as usize]).as_f64();
            count += 1;
        }
        let norm = S::lit(norm);
        let out = Tensor::scalar(S::lit(total) / norm);
        let v = self.push(out, Op::CrossEntropy { logits, targets, norm, probs }, &[logits]);
        self.nodes[v.0].aux = vec![total, count as f64];
        v
    }

    /// `sum_i (beta * mean_pixels(focal_i) + alpha * dice_i) / norm` over
    /// instance rows. `targets` is row-major 0/1 of the same shape.
    /// `aux = [sum mean focal, sum dice]`.
    pub fn seg_loss(&mut self, logits: Var, targets: Arc<Vec<u8>>, p: SegLossParams, norm: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "seg target size");
        let cols = lv.cols;
        let (mut focal_sum, mut dice_sum) = (0.0, 0.0);
        for r in 0..lv.rows {
            let (f, d) = seg_row_forward(lv.row(r), &targets[r * cols..(r + 1) * cols], &p);
            focal_sum += f;
            dice_sum += d;
        }
        let total = (p.beta_focal * focal_sum + p.alpha_dice * dice_sum) / norm;
        let v = self.push(Tensor::scalar(S::lit(total)), Op::SegLoss { logits, targets, p, norm: S::lit(norm) }, &[logits]);
        self.nodes[v.0].aux = vec![focal_sum, dice_sum];
        v
    }

    /// `sum W (F F^T - target)^2 / norm` with `W = m m^T`.
    pub fn gram_loss(&mut self, f: Var, target: Arc<Tensor<S>>, weight: Arc<Vec<S>>, norm: f64) -> Var {
        let fv = self.value(f);
        let n = fv.rows;
        assert_eq!((target.rows, target.cols), (n, n), "gram target shape");
        assert_eq!(weight.len(), n);
        let g = matmul(fv, false, fv, true);
        let mut total = S::zero();
        for i in 0..n {
            for j in 0..n {
                let d = g.data[i * n + j] - target.data[i * n + j];
                total += weight[i] * weight[j] * d * d;
            }
        }
        let norm = S::lit(norm);
        self.push(Tensor::scalar(total / norm), Op::Gram { f, target, weight, norm }, &[f])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = S::zero();
        let mut list = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            total += self.value(v).item() * S::lit(w);
            list.push((v, S::lit(w)));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(list), &inputs)
    }

    /// Backpropagates from a `1 x 1` root.
    pub fn backward(&mut self, root: Var) {
        let (r, c) = self.shape(root);
        assert_eq!((r, c), (1, 1), "backward root must be scalar");
        self.nodes[root.0].grad = Some(Tensor::scalar(S::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor<S>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&mut self, idx: usize, op: &Op<S>, g: &Tensor<S>) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if self.wants(a) {
                    // C = A' B' ; dA' = G B'^T
                    let ga = if ta {
                        matmul(self.value(b), tb, g, true)
                    } else {
                        matmul(g, false, self.value(b), !tb)
                    };
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let gb = if tb {
                        matmul(g, true, self.value(a), ta)
                    } else {
                        matmul(self.value(a), !ta, g, false)
                    };
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRow(a, bias) => {
                let (a, bias) = (*a, *bias);
                if self.wants(bias) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (x, &y) in gb.data.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    self.accumulate(bias, gb);
                }
                self.accumulate(a, g.clone());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let vb = self.value(b);
                    let ga = Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect());
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let va = self.value(a);
                    let gb = Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(&x, &y)| x * y).collect());
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|x| x * s));
            }
            Op::Gelu(a) => {
                let a = *a;
                let c = S::lit(GELU_C);
                let k = S::lit(GELU_K);
                let half = S::lit(0.5);
                let three = S::lit(3.0);
                let xv = self.value(a);
                let ga = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    xv.data
                        .iter()
                        .zip(&g.data)
                        .map(|(&x, &gy)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
                            gy * d
                        })
                        .collect(),
                );
                self.accumulate(a, ga);
            }
            Op::RmsNorm { x, g: gain, inv } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x);
                let gv = self.value(gain);
                let cols = xv.cols;
                let n = S::lit(cols as f64);
                let mut gx = Tensor::zeros(xv.rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                for r in 0..xv.rows {
                    let xr = xv.row(r);
                    let dy = g.row(r);
                    let ir = inv[r];
                    let mut dot = S::zero();
                    for c in 0..cols {
                        dot += dy[c] * gv.data[c] * xr[c];
                        gg.data[c] += dy[c] * xr[c] * ir;
                    }
                    let k = ir * ir * ir * dot / n;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = ir * gv.data[c] * dy[c] - xr[c] * k;
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gain, gg);
            }
            Op::RowNormalize { x, inv } => {
                let x = *x;
                let y = &self.nodes[idx].value;
                let mut gx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let dy = g.row(r);
                    let dot: S = yr.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (dy[c] - yr[c] * dot) * inv[r];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Rope { x, cos, sin, head_dim } => {
                let half = head_dim / 2;
                let mut gx = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                    let src = g.row(r);
                    let dst = gx.row_mut(r);
                    for h in 0..g.cols / head_dim {
                        let base = h * head_dim;
                        for p in 0..half {
                            let (d0, d1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                            dst[base + 2 * p] = d0 * c[p] + d1 * s[p];
                            dst[base + 2 * p + 1] = -d0 * s[p] + d1 * c[p];
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (rows, d) = self.shape(q);
                let hd = d / heads;
                let scale = S::lit(1.0 / (hd as f64).sqrt());
                let mut gq = Tensor::zeros(rows, d);
                let mut gk = Tensor::zeros(rows, d);
                let mut gv = Tensor::zeros(rows, d);
                {
                    let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                    let mut pi = 0;
                    for seg in &layout.segments {
                        let n = seg.len;
                        let mut dp = vec![S::zero(); n * n];
                        for h in 0..heads {
                            let p = &probs[pi];
                            pi += 1;
                            let off = seg.start * d + h * hd;
                            // dV = P^T dO
                            S::gemm(n, n, hd, S::one(), p, 1, n, &g.data[off..], d, 1, S::one(), &mut gv.data[off..], d, 1);
                            // dP = dO V^T
                            S::gemm(n, hd, n, S::one(), &g.data[off..], d, 1, &vv.data[off..], 1, d, S::zero(), &mut dp, n, 1);
                            for i in 0..n {
                                let pr = &p[i * n..(i + 1) * n];
                                let dr = &mut dp[i * n..(i + 1) * n];
                                let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                                for j in 0..n {
                                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                                }
                            }
                            // dQ = dS K ; dK = dS^T Q
                            S::gemm(n, n, hd, S::one(), &dp, n, 1, &kv.data[off..], d, 1, S::one(), &mut gq.data[off..], d, 1);
                            S::gemm(n, n, hd, S::one(), &dp, 1, n, &qv.data[off..], d, 1, S::one(), &mut gk.data[off..], d, 1);
                        }
                    }
                }
                self.accumulate(q, gq);
                self.accumulate(k, gk);
                self.accumulate(v, gv);
            }
            Op::LocalAttn { q, k, v, bias, table, probs } => {
                let (q, k, v, bias) = (*q, *k, *v, *bias);
                let (nq, dk) = self.shape(q);
                let (nk, dv) = self.shape(v);
                let (nb_rows, w) = self.shape(bias);
                let scale = S::lit(1.0 / (dk as f64).sqrt());
                let mut gq = Tensor::zeros(nq, dk);
                let mut gk = Tensor::zeros(nk, dk);
                let mut gvv = Tensor::zeros(nk, dv);
                let mut gb = Tensor::zeros(nb_rows, w);
                {
                    let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                    let mut da = vec![S::zero(); w];
                    for p in 0..nq {
                        let nb = &table.neighbors[p * w..(p + 1) * w];
                        let pr = &probs[p * w..(p + 1) * w];
                        let go = g.row(p);
                        let mut dot = S::zero();
                        for s in 0..w {
                            da[s] = S::zero();
                            if nb[s] == u32::MAX {
                                continue;
                            }
                            let key = nb[s] as usize;
                            da[s] = go.iter().zip(vv.row(key)).map(|(&a, &b)| a * b).sum();
                            dot += pr[s] * da[s];
                            for (o, &x) in gvv.row_mut(key).iter_mut().zip(go) {
                                *o += pr[s] * x;
                            }
                        }
                        let brow = table.bias_row[p] as usize;
                        for s in 0..w {
                            if nb[s] == u32::MAX {
                                continue;
                            }
                            let key = nb[s] as usize;
                            let dl = pr[s] * (da[s] - dot);
                            gb.data[brow * w + s] += dl;
                            let dls = dl * scale;
                            for (o, &x) in gq.row_mut(p).iter_mut().zip(kv.row(key)) {
                                *o += dls * x;
                            }
                            for (o, &x) in gk.row_mut(key).iter_mut().zip(qv.row(p)) {
                                *o += dls * x;
                            }
                        }
                    }
                }
                self.accumulate(q, gq);
                self.accumulate(k, gk);
                self.accumulate(v, gvv);
                self.accumulate(bias, gb);
            }
            Op::Gather { a, idx } => {
                let a = *a;
                if self.wants(a) {
                    let (rows, cols) = self.shape(a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(i as usize).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(a, ga);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.wants(p) {
                        let data = g.data[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(p, Tensor::from_vec(rows, cols, data));
                    }
                    offset += rows;
                }
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(*a, Tensor::from_vec(rows, cols, g.data.clone()));
            }
            Op::Resample { a, map } => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let src = g.row(r);
                    let dst = ga.row_mut(r);
                    for (o, entries) in map.rows.iter().enumerate() {
                        for &(i, w) in entries {
                            dst[i as usize] += src[o] * S::lit(w);
                        }
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::CrossEntropy { logits, targets, norm, probs } => {
                let (rows, cols) = self.shape(*logits);
                let scale = g.item() / *norm * fault_sign::<S>(Fault::CrossEntropyGradSign);
                let mut gl = Tensor::zeros(rows, cols);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let dst = gl.row_mut(r);
                    for (o, &p) in dst.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *o = p * scale;
                    }
                    dst[t as usize] -= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::SegLoss { logits, targets, p, norm } => {
                let lv = self.value(*logits);
                let cols = lv.cols;
                let scale = g.item().as_f64() / norm.as_f64();
                let mut gl = Tensor::zeros(lv.rows, cols);
                let fs = fault_sign::<S>(Fault::FocalGradSign).as_f64();
                let ds = fault_sign::<S>(Fault::DiceGradSign).as_f64();
                for r in 0..lv.rows {
                    seg_row_backward(
                        lv.row(r),
                        &targets[r * cols..(r + 1) * cols],
                        p,
                        scale * p.beta_focal * fs,
                        scale * p.alpha_dice * ds,
                        gl.row_mut(r),
                    );
                }
                self.accumulate(*logits, gl);
            }
            Op::Gram { f, target, weight, norm } => {
                let fv = self.value(*f);
                let n = fv.rows;
                let gmat = matmul(fv, false, fv, true);
                let mut wd = Tensor::zeros(n, n);
                let k = S::lit(4.0) * g.item() / *norm * fault_sign::<S>(Fault::GramGradSign);
                for i in 0..n {
                    for j in 0..n {
                        wd.data[i * n + j] = k * weight[i] * weight[j] * (gmat.data[i * n + j] - target.data[i * n + j]);
                    }
                }
                let gf = matmul(&wd, false, fv, false);
                self.accumulate(*f, gf);
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(v, w) in terms {
                    self.accumulate(v, Tensor::scalar(gs * w));
                }
            }
        }
    }
}

/// Mean focal loss and dice loss of one instance row.
pub fn seg_row_forward<S: Scalar>(logits: &[S], target: &[u8], p: &SegLossParams) -> (f64, f64) {
    let n = logits.len() as f64;
    let (mut focal, mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let x = x.as_f64();
        let prob = sigmoid(x);
        if y != 0 {
            focal += p.focal_alpha * (1.0 - prob).powf(p.gamma) * softplus(-x);
            inter += prob;
            ysum += 1.0;
        } else {
            focal += (1.0 - p.focal_alpha) * prob.powf(p.gamma) * softplus(x);
        }
        psum += prob;
    }
    let dice = 1.0 - (2.0 * inter + p.smooth) / (psum + ysum + p.smooth);
    (focal / n, dice)
}

fn seg_row_backward<S: Scalar>(
    logits: &[S],
    target: &[u8],
    p: &SegLossParams,
    focal_scale: f64,
    dice_scale: f64,
    out: &mut [S],
) {
    let n = logits.len() as f64;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let prob = sigmoid(x.as_f64());
        psum += prob;
        if y != 0 {
            inter += prob;
            ysum += 1.0;
        }
    }
    let den = psum + ysum + p.smooth;
    let num = 2.0 * inter + p.smooth;
    let g = p.gamma;
    for ((o, &x), &y) in out.iter_mut().zip(logits).zip(target) {
        let x = x.as_f64();
        let prob = sigmoid(x);
        let q = 1.0 - prob;
        // d focal / dx, using log p = -softplus(-x), log(1-p) = -softplus(x).
        let df = if y != 0 {
            p.focal_alpha * (-g * q.powf(g) * prob * softplus(-x) - q.powf(g + 1.0))
        } else {
            (1.0 - p.focal_alpha) * (prob.powf(g + 1.0) + g * prob.powf(g) * q * softplus(x))
        };
        let yy = if y != 0 { 1.0 } else { 0.0 };
        let dd = -(2.0 * yy * den - num) / (den * den) * prob * q;
        *o = S::lit(focal_scale * df / n + dice_scale * dd);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(build)/d(input) against central differences for every
    /// input entry. `build` returns a scalar root.
    fn gradcheck(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.backward(root);
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let r = build(&mut g, &vars);
            g.value(r).item()
        };
        let h = 1e-6;
        for (which, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[which].data[e] += h;
                let mut minus = inputs.clone();
                minus[which].data[e] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic[which].data[e];
                let err = (num - ana).abs() / (1e-6 + num.abs().max(ana.abs()));
                assert!(err < 1e-5 || (num - ana).abs() < 1e-8, "input {which} entry {e}: numeric {num} analytic {ana}");
            }
        }
    }

    /// A fixed random projection to turn any tensor into a scalar.
    fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let (r, c) = (g.value(x).rows, g.value(x).cols);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, r, c));
        let m = g.mul(x, w);
        let ones = g.constant(Tensor::from_vec(1, r, vec![1.0; r]));
        let s = g.matmul(ones, m);
        let ones_c = g.constant(Tensor::from_vec(c, 1, vec![1.0; c]));
        g.matmul(s, ones_c)
    }

    #[test]
    fn grad_matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_tensor(&mut rng, 4, 3) } else { rand_tensor(&mut rng, 3, 4) };
            let b = if tb { rand_tensor(&mut rng, 5, 4) } else { rand_tensor(&mut rng, 4, 5) };
            gradcheck(vec![a, b], |g, v| {
                let c = g.matmul_t(v[0], ta, v[1], tb);
                probe(g, c, 9)
            });
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        let bias = rand_tensor(&mut rng, 1, 4);
        gradcheck(vec![a, b, bias], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let r = g.add_row(m, v[2]);
            let e = g.gelu(r);
            let sc = g.scale(e, -1.7);
            probe(g, sc, 3)
        });
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 3, 6);
        let gain = rand_tensor(&mut rng, 1, 6);
        gradcheck(vec![x.clone(), gain], |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-6);
            probe(g, y, 4)
        });
        gradcheck(vec![x], |g, v| {
            let y = g.row_normalize(v[0]);
            probe(g, y, 5)
        });
    }

    #[test]
    fn grad_rope_gather_concat_reshape_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 3, 8);
        let cos: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let sin: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let (cos, sin) = (Arc::new(cos), Arc::new(sin));
        let y = rand_tensor(&mut rng, 2, 8);
        let map = Arc::new(SparseMap { n_in: 4, rows: vec![vec![(0, 0.5), (1, 0.5)], vec![(3, 1.0)], vec![(2, 0.25), (1, 0.75)]] });
        gradcheck(vec![x, y], move |g, v| {
            let r = g.rope(v[0], cos.clone(), sin.clone(), 4);
            let c = g.concat_rows(&[r, v[1]]);
            let gth = g.gather_rows(c, Arc::new(vec![4, 0, 0, 2]));
            let rs = g.reshape(gth, 8, 4);
            let out = g.resample(rs, map.clone());
            probe(g, out, 6)
        });
    }

    fn toy_layout() -> Arc<AttnLayout> {
        // Two segments; the first has an image-like bidirectional prefix.
        let m1 = vec![
            true, true, false, false, //
            true, true, false, false, //
            true, true, true, false, //
            true, true, true, true,
        ];
        let m2 = vec![true, false, true, true];
        Arc::new(AttnLayout {
            segments: vec![
                AttnSegment { start: 0, len: 4, mask: m1 },
                AttnSegment { start: 4, len: 2, mask: m2 },
            ],
        })
    }

    #[test]
    fn grad_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 6, 8);
        let k = rand_tensor(&mut rng, 6, 8);
        let v = rand_tensor(&mut rng, 6, 8);
        let layout = toy_layout();
        gradcheck(vec![q, k, v], move |g, x| {
            let o = g.attention(x[0], x[1], x[2], 2, layout.clone());
            probe(g, o, 7)
        });
    }

    #[test]
    fn attention_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_tensor(&mut rng, 6, 8);
        let k = rand_tensor(&mut rng, 6, 8);
        let mut v = rand_tensor(&mut rng, 6, 8);
        let run = |v: &Tensor<f64>| {
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(a, b, c, 2, toy_layout());
            g.value(o).clone()
        };
        let before = run(&v);
        // Row 3 of segment one is invisible to rows 0..3; segment two never sees it.
        for x in v.row_mut(3) {
            *x += 10.0;
        }
        let after = run(&v);
        for r in [0, 1, 2, 4, 5] {
            assert_eq!(before.row(r), after.row(r), "row {r}");
        }
        assert_ne!(before.row(3), after.row(3));
    }

    #[test]
    fn grad_local_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_tensor(&mut rng, 5, 3);
        let k = rand_tensor(&mut rng, 4, 3);
        let v = rand_tensor(&mut rng, 4, 2);
        let bias = rand_tensor(&mut rng, 2, 3);
        let table = Arc::new(LocalTable {
            window: 3,
            neighbors: vec![0, 1, u32::MAX, 1, 2, 3, 3, u32::MAX, 0, 2, 2, 1, u32::MAX, u32::MAX, 3],
            bias_row: vec![0, 1, 1, 0, 1],
        });
        gradcheck(vec![q, k, v, bias], move |g, x| {
            let o = g.local_attention(x[0], x[1], x[2], x[3], table.clone());
            probe(g, o, 8)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = rand_tensor(&mut rng, 4, 5);
        let t = Arc::new(vec![Some(1), None, Some(4), Some(0)]);
        gradcheck(vec![l], move |g, x| g.cross_entropy(x[0], t.clone(), 2.5));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(2, 7));
        let ce = g.cross_entropy(l, Arc::new(vec![Some(3), Some(0)]), 2.0);
        assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-12);
        assert_eq!(g.aux(ce), &[2.0 * 7f64.ln(), 2.0]);
    }

    const SEG: SegLossParams = SegLossParams { alpha_dice: 10.0, beta_focal: 200.0, gamma: 2.0, focal_alpha: 0.25, smooth: 1.0 };

    #[test]
    fn grad_seg_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = rand_tensor(&mut rng, 2, 6).map(|x| 3.0 * x);
        let t = Arc::new(vec![1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        gradcheck(vec![l], move |g, x| g.seg_loss(x[0], t.clone(), SEG, 1.5));
    }

    #[test]
    fn grad_gram_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = rand_tensor(&mut rng, 4, 3);
        let t = rand_tensor(&mut rng, 4, 4);
        let target = Arc::new(matmul(&t, false, &t, true));
        let w = Arc::new(vec![1.0, 1.0, 0.0, 1.0]);
        gradcheck(vec![f], move |g, x| {
            let n = g.row_normalize(x[0]);
            g.gram_loss(n, target.clone(), w.clone(), 9.0)
        });
    }

    #[test]
    fn grad_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, 2, 2);
        gradcheck(vec![a], |g, x| {
            let p1 = probe(g, x[0], 1);
            let p2 = probe(g, x[0], 2);
            g.weighted_sum(&[(p1, 0.3), (p2, -2.0)])
        });
    }

    #[test]
    fn fault_flips_dice_gradient() {
        let l = Tensor::<f64>::from_f64(1, 4, &[0.3, -0.2, 1.0, -1.0]);
        let t = Arc::new(vec![1, 0, 1, 0]);
        let p = SegLossParams { beta_focal: 0.0, ..SEG };
        let run = || {
            let mut g = Graph::new();
            let x = g.param(l.clone());
            let s = g.seg_loss(x, t.clone(), p, 1.0);
            g.backward(s);
            g.grad(x).unwrap().clone()
        };
        let clean = run();
        let flipped = with_fault(Fault::DiceGradSign, run);
        for (a, b) in clean.data.iter().zip(&flipped.data) {
            assert!((a + b).abs() < 1e-15);
        }
        assert_eq!(run(), clean);
    }
}
