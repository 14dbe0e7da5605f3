//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its forward value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, add_into, log_add};
use super::tensor::Tensor;
use crate::error::{Result, SateError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-position mask for attention: keys at or beyond `key_len` are padding,
/// and with `causal` query `i` only sees keys `0..=i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    pub key_len: usize,
    pub causal: bool,
}

#[derive(Debug, Clone, Copy)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0usize; self.len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (k, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.len + k) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
        layout: AxisLayout,
    },
    LogSoftmax {
        x: Var,
        layout: AxisLayout,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Ctc {
        log_probs: Var,
        ext: Vec<usize>,
        alpha: Vec<f64>,
        total: f64,
    },
    RenormNonBlank {
        p: Var,
        sums: Vec<f64>,
        fallback: Vec<bool>,
    },
    SoftTargetCe {
        log_probs: Var,
        target: Vec<f32>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: f32,
        probs: Vec<f32>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Full-precision result of scalar reductions.
    exact: Option<f64>,
    /// Full-precision copy of the value, kept on wide tapes only.
    wide: Option<Vec<f64>>,
}

/// Records a forward computation for later gradient propagation.
///
/// One tape per thread. Leaf gradients persist across `backward` calls and
/// accumulate until [`Tape::zero_grads`].
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f32>>,
    bindings: HashMap<(u64, usize), Var>,
    training: bool,
    check_finite: bool,
    keep_wide: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bindings: HashMap::new(),
            training: false,
            check_finite: false,
            keep_wide: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// An evaluation tape that also carries every value in `f64`, so the
    /// result depends on its inputs without `f32` rounding in between.
    /// Used for finite-difference checks.
    pub fn precise() -> Self {
        Tape {
            keep_wide: true,
            ..Self::new()
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Turns on NaN/Inf detection after every operation.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Signs of every ReLU input, in tape order. Two evaluations with
    /// different patterns lie on different linear pieces of the graph.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.wide(a).iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    /// Scalar value, at `f64` precision when the producing op is a reduction.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact
            .or_else(|| n.wide.as_ref().map(|w| w[0]))
            .unwrap_or_else(|| n.value.item() as f64)
    }

    fn push_scalar(&mut self, name: &'static str, value: f64, op: Op, inputs: &[Var]) -> Result<Var> {
        let v = self.push(name, Tensor::scalar(value as f32), op, inputs)?;
        self.nodes[v.0].exact = Some(value);
        Ok(v)
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    pub(crate) fn binding(&self, key: (u64, usize)) -> Option<Var> {
        self.bindings.get(&key).copied()
    }

    pub(crate) fn bind(&mut self, key: (u64, usize), v: Var) {
        self.bindings.insert(key, v);
    }

    /// `(slot, var)` pairs bound for the parameter store `uid`, by slot.
    pub(crate) fn bindings_of(&self, uid: u64) -> Vec<(usize, Var)> {
        let mut out: Vec<(usize, Var)> = self
            .bindings
            .iter()
            .filter(|((u, _), _)| *u == uid)
            .map(|(&(_, slot), &v)| (slot, v))
            .collect();
        out.sort_unstable_by_key(|&(slot, _)| slot);
        out
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn var(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_node(t, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            exact: None,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(SateError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(value, op, needs_grad))
    }

    /// Values of `v` in `f64`, exact where the producing op kept them.
    fn wide(&self, v: Var) -> Cow<'_, [f64]> {
        let n = &self.nodes[v.0];
        match &n.wide {
            Some(w) => Cow::Borrowed(w),
            None => Cow::Owned(n.value.data().iter().map(|&x| x as f64).collect()),
        }
    }

    /// Rounds `out` into the node value, keeping the `f64` copy on wide tapes.
    fn push_wide(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        out: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        let t = Tensor::new(shape, out.iter().map(|&v| v as f32).collect())?;
        let v = self.push(name, t, op, inputs)?;
        if self.keep_wide {
            self.nodes[v.0].wide = Some(out);
        }
        Ok(v)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SateError::dim(
                name,
                format!("{:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = {
            let (x, y) = (self.wide(a), self.wide(b));
            x.iter().zip(y.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        self.push_wide(name, self.shape(a).to_vec(), out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.wide(a).iter().map(|&x| f(x)).collect();
        self.push_wide(name, self.shape(a).to_vec(), out, op, &[a])
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(SateError::dim(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = kernels::matmul_wide(&self.wide(a), &self.wide(b), m, k, n);
        self.push_wide("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(SateError::dim(
                "matmul_bt",
                format!("{:?} · {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let out = {
            let (a, b) = (self.wide(a), self.wide(b));
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = kernels::dot_wide(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
                }
            }
            out
        };
        self.push_wide("matmul_bt", vec![m, n], out, Op::MatMulBt(a, b), &[a, b])
    }

    /// Affine map `x·W + b` with `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x);
        let (k2, n) = self.dims2(w);
        if k != k2 {
            return Err(SateError::dim(
                "linear",
                format!("{:?} · {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let mut out = kernels::matmul_wide(&self.wide(x), &self.wide(w), m, k, n);
        if let Some(b) = b {
            if self.nodes[b.0].value.len() != n {
                return Err(SateError::dim("linear", "bias length"));
            }
            let bias = self.wide(b);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias.iter()).for_each(|(o, &b)| *o += b);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push_wide("linear", vec![m, n], out, Op::Linear { x, w, b }, &inputs)
    }

    // ── elementwise ───────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c as f64)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity on
    /// evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(SateError::Contract(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = self.wide(x).iter().zip(&mask).map(|(&a, &m)| a * m as f64).collect();
        self.push_wide("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    // ── normalization ─────────────────────────────────────────────────

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.dims2(x);
        if self.nodes[gamma.0].value.len() != n || self.nodes[beta.0].value.len() != n {
            return Err(SateError::dim("layer_norm", "affine parameters"));
        }
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f64; m * n];
        {
            let (xs, g, b) = (self.wide(x), self.wide(gamma), self.wide(beta));
            for i in 0..m {
                let row = &xs[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[i] = r as f32;
                for j in 0..n {
                    let h = (row[j] - mean) * r;
                    xhat[i * n + j] = h as f32;
                    out[i * n + j] = h * g[j] + b[j];
                }
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push_wide("layer_norm", self.shape(x).to_vec(), out, op, &[x, gamma, beta])
    }

    fn layout(&self, x: Var, axis: usize, op: &'static str) -> Result<AxisLayout> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(SateError::dim(op, format!("axis {axis} of {shape:?}")));
        }
        Ok(AxisLayout::of(shape, axis))
    }

    fn lanewise(&self, x: Var, layout: AxisLayout, f: fn(&[f64], &mut [f64])) -> Vec<f64> {
        let src = self.wide(x);
        let mut out = vec![0.0f64; src.len()];
        let mut lane = vec![0.0f64; layout.len];
        let mut lane_out = vec![0.0f64; layout.len];
        layout.for_each_lane(|idx| {
            for (l, &i) in lane.iter_mut().zip(idx) {
                *l = src[i];
            }
            f(&lane, &mut lane_out);
            for (l, &i) in lane_out.iter().zip(idx) {
                out[i] = *l;
            }
        });
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let layout = self.layout(x, axis, "softmax")?;
        let out = self.lanewise(x, layout, kernels::softmax_wide);
        self.push_wide("softmax", self.shape(x).to_vec(), out, Op::Softmax { x, layout }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let layout = self.layout(x, axis, "log_softmax")?;
        let out = self.lanewise(x, layout, kernels::log_softmax_wide);
        self.push_wide("log_softmax", self.shape(x).to_vec(), out, Op::LogSoftmax { x, layout }, &[x])
    }

    // ── indexing and layout ───────────────────────────────────────────

    /// Gathers rows of a `[rows×d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table);
        if ids.is_empty() {
            return Err(SateError::dim("embed", "empty id sequence"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(SateError::Index {
                what: "embedding table",
                index: id,
                size: rows,
            });
        }
        let out = {
            let src = self.wide(table);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&src[id * d..(id + 1) * d]);
            }
            out
        };
        let op = Op::Embed {
            table,
            ids: ids.to_vec(),
        };
        self.push_wide("embed", vec![ids.len(), d], out, op, &[table])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a);
        let (mb, nb) = self.dims2(b);
        if na != nb {
            return Err(SateError::dim("concat_rows", format!("{na} vs {nb} columns")));
        }
        let mut out = self.wide(a).into_owned();
        out.extend_from_slice(&self.wide(b));
        self.push_wide("concat_rows", vec![ma + mb, na], out, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a);
        let (mb, nb) = self.dims2(b);
        if ma != mb {
            return Err(SateError::dim("concat_cols", format!("{ma} vs {mb} rows")));
        }
        let out = {
            let (da, db) = (self.wide(a), self.wide(b));
            let mut out = Vec::with_capacity(ma * (na + nb));
            for i in 0..ma {
                out.extend_from_slice(&da[i * na..(i + 1) * na]);
                out.extend_from_slice(&db[i * nb..(i + 1) * nb]);
            }
            out
        };
        self.push_wide("concat_cols", vec![ma, na + nb], out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Unfolds `[T×c]` into `[⌈T/stride⌉ × kernel·c]` windows centred on
    /// `stride·o`, replicating edge rows where the window leaves the input.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t_in, c) = self.dims2(x);
        if kernel == 0 || stride == 0 {
            return Err(SateError::dim("im2col", "kernel and stride must be positive"));
        }
        let t_out = t_in.div_ceil(stride);
        let out = {
            let src = self.wide(x);
            let mut out = Vec::with_capacity(t_out * kernel * c);
            for o in 0..t_out {
                for kk in 0..kernel {
                    let r = im2col_row(o, kk, kernel, stride, t_in);
                    out.extend_from_slice(&src[r * c..(r + 1) * c]);
                }
            }
            out
        };
        let op = Op::Im2Col { x, kernel, stride };
        self.push_wide("im2col", vec![t_out, kernel * c], out, op, &[x])
    }

    // ── attention ─────────────────────────────────────────────────────

    /// Scaled dot-product attention over `heads` equal slices of the model
    /// dimension. `q: [Lq×d]`, `k, v: [Lk×d]` → `[Lq×d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (lq, d) = self.dims2(q);
        let (lk, dk) = self.dims2(k);
        let (lv, dv) = self.dims2(v);
        if d != dk || d != dv || lk != lv || heads == 0 || d % heads != 0 {
            return Err(SateError::dim(
                "attention",
                format!("q {lq}x{d}, k {lk}x{dk}, v {lv}x{dv}, {heads} heads"),
            ));
        }
        if mask.key_len == 0 || mask.key_len > lk {
            return Err(SateError::dim(
                "attention",
                format!("mask length {} for {lk} keys", mask.key_len),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0f32; heads * lq * lk];
        let mut out = vec![0.0f64; lq * d];
        {
            let (qs, ks, vs) = (self.wide(q), self.wide(k), self.wide(v));
            let mut scores = vec![0.0f64; lk];
            let mut p = vec![0.0f64; lk];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let visible = visible_keys(mask, i);
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = if j < visible {
                            kernels::dot_wide(
                                &qs[i * d + off..i * d + off + dh],
                                &ks[j * d + off..j * d + off + dh],
                            ) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    kernels::softmax_wide(&scores, &mut p);
                    let base = (h * lq + i) * lk;
                    for (dst, &pj) in probs[base..base + lk].iter_mut().zip(&p) {
                        *dst = pj as f32;
                    }
                    let acc = &mut out[i * d + off..i * d + off + dh];
                    for (j, &pj) in p[..visible].iter().enumerate() {
                        for (a, &vv) in acc.iter_mut().zip(&vs[j * d + off..j * d + off + dh]) {
                            *a += pj * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push_wide("attention", vec![lq, d], out, op, &[q, k, v])
    }

    /// Row-normalized attention weights `[heads × Lq × Lk]` saved by an
    /// [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f32], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs.as_slice(), *heads)),
            _ => None,
        }
    }

    // ── losses ────────────────────────────────────────────────────────

    /// Negative log-likelihood of `labels` under the CTC lattice of
    /// per-frame `log_probs: [T×C]`, blank = 0. Returns `None` when no
    /// alignment exists for `T` frames.
    pub fn ctc_nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Option<Var>> {
        let (t_len, classes) = self.dims2(log_probs);
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l >= classes) {
            return Err(SateError::Index {
                what: "ctc label",
                index: bad,
                size: classes,
            });
        }
        let mut ext = Vec::with_capacity(2 * labels.len() + 1);
        ext.push(0);
        for &l in labels {
            ext.push(l);
            ext.push(0);
        }
        let s_len = ext.len();
        let lp = self.wide(log_probs);
        let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
        alpha[0] = lp[ext[0]];
        if s_len > 1 {
            alpha[1] = lp[ext[1]];
        }
        for t in 1..t_len {
            let (prev, cur) = alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            for s in 0..s_len {
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if skip_allowed(&ext, s) {
                    acc = log_add(acc, prev[s - 2]);
                }
                cur[s] = if acc == f64::NEG_INFINITY {
                    acc
                } else {
                    acc + lp[t * classes + ext[s]]
                };
            }
        }
        let last = &alpha[(t_len - 1) * s_len..];
        let mut total = last[s_len - 1];
        if s_len > 1 {
            total = log_add(total, last[s_len - 2]);
        }
        if total == f64::NEG_INFINITY {
            return Ok(None);
        }
        let op = Op::Ctc {
            log_probs,
            ext,
            alpha,
            total,
        };
        self.push_scalar("ctc_nll", -total, op, &[log_probs]).map(Some)
    }

    /// Drops column 0 (blank) of a row-stochastic `[T×C]` matrix and
    /// renormalizes the rest. Rows whose blank mass exceeds `0.999` become
    /// uniform over the remaining `C-1` columns.
    pub fn renorm_non_blank(&mut self, p: Var) -> Result<Var> {
        const BLANK_CUTOFF: f64 = 0.999;
        let (t_len, c) = self.dims2(p);
        if c < 2 {
            return Err(SateError::dim("renorm_non_blank", "need at least one non-blank column"));
        }
        let mut out = vec![0.0f64; t_len * (c - 1)];
        let mut sums = vec![0.0f64; t_len];
        let mut fallback = vec![false; t_len];
        {
            let src = self.wide(p);
            for t in 0..t_len {
                let row = &src[t * c..(t + 1) * c];
                let dst = &mut out[t * (c - 1)..(t + 1) * (c - 1)];
                if row[0] > BLANK_CUTOFF {
                    fallback[t] = true;
                    dst.iter_mut().for_each(|v| *v = 1.0 / (c - 1) as f64);
                    continue;
                }
                let s: f64 = row[1..].iter().sum();
                sums[t] = s;
                for (d, &v) in dst.iter_mut().zip(&row[1..]) {
                    *d = v / s;
                }
            }
        }
        let op = Op::RenormNonBlank { p, sums, fallback };
        self.push_wide("renorm_non_blank", vec![t_len, c - 1], out, op, &[p])
    }

    /// `−Σ target ⊙ log_probs`, summed over every element.
    pub fn soft_target_ce(&mut self, log_probs: Var, target: &Tensor) -> Result<Var> {
        if self.shape(log_probs) != target.shape() {
            return Err(SateError::dim(
                "soft_target_ce",
                format!("{:?} vs target {:?}", self.shape(log_probs), target.shape()),
            ));
        }
        let loss: f64 = -self
            .wide(log_probs)
            .iter()
            .zip(target.data())
            .map(|(&l, &q)| if q == 0.0 { 0.0 } else { q as f64 * l })
            .sum::<f64>();
        let op = Op::SoftTargetCe {
            log_probs,
            target: target.data().to_vec(),
        };
        self.push_scalar("soft_target_ce", loss, op, &[log_probs])
    }

    /// Label-smoothed cross-entropy, summed over rows of `logits: [N×C]`:
    /// `(1−ε)·NLL(target) + ε·mean_k NLL(k)` per row.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[usize], eps: f32) -> Result<Var> {
        let (n, c) = self.dims2(logits);
        if targets.len() != n {
            return Err(SateError::dim(
                "smoothed_ce",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(SateError::Contract(format!("label smoothing {eps} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(SateError::Index {
                what: "vocabulary",
                index: bad,
                size: c,
            });
        }
        let src = self.wide(logits);
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        let mut lane = vec![0.0f64; c];
        for i in 0..n {
            kernels::log_softmax_wide(&src[i * c..(i + 1) * c], &mut lane);
            let mean_nll = -lane.iter().sum::<f64>() / c as f64;
            let nll = -lane[targets[i]];
            loss += (1.0 - eps as f64) * nll + eps as f64 * mean_nll;
            for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(&lane) {
                *p = l.exp() as f32;
            }
        }
        let op = Op::SmoothedCe {
            logits,
            targets: targets.to_vec(),
            eps,
            probs,
        };
        self.push_scalar("smoothed_ce", loss, op, &[logits])
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.wide(x).iter().sum();
        self.push_scalar("sum", s, Op::Sum(x), &[x])
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs, accumulated in `f64`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(SateError::dim("weighted_sum", "no terms"));
        };
        let shape = self.shape(first).to_vec();
        if shape == [1] {
            let mut total = 0.0f64;
            for &(v, w) in terms {
                if self.shape(v) != [1] {
                    return Err(SateError::dim("weighted_sum", "mismatched shapes"));
                }
                total += w * self.scalar_f64(v);
            }
            let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
            return self.push_scalar("weighted_sum", total, Op::WeightedSum(terms.to_vec()), &inputs);
        }
        let mut acc = vec![0.0f64; self.nodes[first.0].value.len()];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(SateError::dim("weighted_sum", "mismatched shapes"));
            }
            for (a, &x) in acc.iter_mut().zip(self.wide(v).iter()) {
                *a += w * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_wide("weighted_sum", shape, acc, Op::WeightedSum(terms.to_vec()), &inputs)
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Propagates `d loss / d leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SateError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| nodes[v.0].value.dims2();
        let mut send = |v: Var, d: Vec<f32>| accumulate(grads, v, d);

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (dims(*a), dims(*b));
                if needs(*a) {
                    send(*a, kernels::matmul_bt(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_acc(&mut db, val(*a), g, m, k, n);
                    send(*b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let ((m, k), (n, _)) = (dims(*a), dims(*b));
                if needs(*a) {
                    send(*a, kernels::matmul(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_at_acc(&mut db, g, val(*a), m, n, k);
                    send(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ((m, k), (_, n)) = (dims(*x), dims(*w));
                if needs(*x) {
                    send(*x, kernels::matmul_bt(g, val(*w), m, n, k));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    kernels::matmul_at_acc(&mut dw, val(*x), g, m, k, n);
                    send(*w, dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r as f64);
                    }
                    send(b, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, g.to_vec());
                }
                if needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|g| g * c).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = dims(*x);
                let gm = val(*gamma);
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0f64; n];
                    let mut db = vec![0.0f64; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += (g[r * n + j] * xhat[r * n + j]) as f64;
                            db[j] += g[r * n + j] as f64;
                        }
                    }
                    if needs(*gamma) {
                        send(*gamma, dg.into_iter().map(|v| v as f32).collect());
                    }
                    if needs(*beta) {
                        send(*beta, db.into_iter().map(|v| v as f32).collect());
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..n {
                            let dh = (gr[j] * gm[j]) as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j] as f64;
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = (gr[j] * gm[j]) as f64;
                            dx[r * n + j] = (rstd[r] as f64
                                * (dh - mean_dh - hr[j] as f64 * mean_dh_h))
                                as f32;
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Softmax { x, layout } => {
                let y = nodes[i].value.data();
                let mut dx = vec![0.0f32; y.len()];
                layout.for_each_lane(|idx| {
                    let dot: f64 = idx.iter().map(|&k| g[k] as f64 * y[k] as f64).sum();
                    for &k in idx {
                        dx[k] = (y[k] as f64 * (g[k] as f64 - dot)) as f32;
                    }
                });
                send(*x, dx);
            }
            Op::LogSoftmax { x, layout } => {
                let y = nodes[i].value.data();
                let mut dx = vec![0.0f32; y.len()];
                layout.for_each_lane(|idx| {
                    let gs: f64 = idx.iter().map(|&k| g[k] as f64).sum();
                    for &k in idx {
                        dx[k] = (g[k] as f64 - (y[k] as f64).exp() * gs) as f32;
                    }
                });
                send(*x, dx);
            }
            Op::Embed { table, ids } => {
                let (rows, d) = dims(*table);
                let mut dt = vec![0.0f32; rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                send(*table, dt);
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.len();
                if needs(*a) {
                    send(*a, g[..split].to_vec());
                }
                if needs(*b) {
                    send(*b, g[split..].to_vec());
                }
            }
            Op::ConcatCols(a, b) => {
                let ((m, na), (_, nb)) = (dims(*a), dims(*b));
                let w = na + nb;
                if needs(*a) {
                    send(*a, (0..m).flat_map(|r| g[r * w..r * w + na].to_vec()).collect());
                }
                if needs(*b) {
                    send(*b, (0..m).flat_map(|r| g[r * w + na..(r + 1) * w].to_vec()).collect());
                }
            }
            Op::Im2Col { x, kernel, stride } => {
                let (t_in, c) = dims(*x);
                let t_out = t_in.div_ceil(*stride);
                let mut dx = vec![0.0f32; t_in * c];
                for o in 0..t_out {
                    for kk in 0..*kernel {
                        let r = im2col_row(o, kk, *kernel, *stride, t_in);
                        let src = &g[(o * kernel + kk) * c..(o * kernel + kk + 1) * c];
                        add_into(&mut dx[r * c..(r + 1) * c], src);
                    }
                }
                send(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (lq, d) = dims(*q);
                let (lk, _) = dims(*k);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0f32; lq * d];
                let mut dk = vec![0.0f32; lk * d];
                let mut dv = vec![0.0f32; lk * d];
                let mut ds = vec![0.0f64; lk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i2 in 0..lq {
                        let p = &probs[(h * lq + i2) * lk..(h * lq + i2 + 1) * lk];
                        let go = &g[i2 * d + off..i2 * d + off + dh];
                        let mut row_dot = 0.0f64;
                        for j in 0..lk {
                            if p[j] == 0.0 {
                                ds[j] = 0.0;
                                continue;
                            }
                            let dp = kernels::dot(go, &vs[j * d + off..j * d + off + dh]);
                            ds[j] = dp;
                            row_dot += dp * p[j] as f64;
                            for (dvv, &gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                *dvv += p[j] * gg;
                            }
                        }
                        for j in 0..lk {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let s = p[j] as f64 * (ds[j] - row_dot) * scale;
                            let s = s as f32;
                            for c in 0..dh {
                                dq[i2 * d + off + c] += s * ks[j * d + off + c];
                                dk[j * d + off + c] += s * qs[i2 * d + off + c];
                            }
                        }
                    }
                }
                if needs(*q) {
                    send(*q, dq);
                }
                if needs(*k) {
                    send(*k, dk);
                }
                if needs(*v) {
                    send(*v, dv);
                }
            }
            Op::Ctc {
                log_probs,
                ext,
                alpha,
                total,
            } => {
                let (t_len, classes) = dims(*log_probs);
                let lp: Vec<f64> = match &nodes[log_probs.0].wide {
                    Some(w) => w.clone(),
                    None => val(*log_probs).iter().map(|&x| x as f64).collect(),
                };
                let s_len = ext.len();
                let upstream = g[0] as f64;
                // Adjoint of α, swept backwards through the recursion.
                let mut adj = vec![0.0f64; t_len * s_len];
                let last = (t_len - 1) * s_len;
                for s in s_len.saturating_sub(2)..s_len {
                    if alpha[last + s] > f64::NEG_INFINITY {
                        adj[last + s] = -upstream * (alpha[last + s] - total).exp();
                    }
                }
                let mut dlp = vec![0.0f32; t_len * classes];
                for t in (0..t_len).rev() {
                    for s in 0..s_len {
                        let a_bar = adj[t * s_len + s];
                        let a = alpha[t * s_len + s];
                        if a_bar == 0.0 || a == f64::NEG_INFINITY {
                            continue;
                        }
                        dlp[t * classes + ext[s]] += a_bar as f32;
                        if t == 0 {
                            continue;
                        }
                        // α[t][s] = lse(preds) + lp[t][ext[s]]
                        let lse = a - lp[t * classes + ext[s]];
                        let prev = (t - 1) * s_len;
                        let mut preds = [Some(s), s.checked_sub(1), None];
                        if skip_allowed(ext, s) {
                            preds[2] = Some(s - 2);
                        }
                        for p in preds.into_iter().flatten() {
                            let ap = alpha[prev + p];
                            if ap > f64::NEG_INFINITY {
                                adj[prev + p] += a_bar * (ap - lse).exp();
                            }
                        }
                    }
                }
                send(*log_probs, dlp);
            }
            Op::RenormNonBlank { p, sums, fallback } => {
                let (t_len, c) = dims(*p);
                let out = nodes[i].value.data();
                let mut dp = vec![0.0f32; t_len * c];
                for t in 0..t_len {
                    if fallback[t] {
                        continue;
                    }
                    let gr = &g[t * (c - 1)..(t + 1) * (c - 1)];
                    let r = &out[t * (c - 1)..(t + 1) * (c - 1)];
                    let dot: f64 = gr.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..c - 1 {
                        dp[t * c + j + 1] = ((gr[j] as f64 - dot) / sums[t]) as f32;
                    }
                }
                send(*p, dp);
            }
            Op::SoftTargetCe { log_probs, target } => {
                send(*log_probs, target.iter().map(|&q| -q * g[0]).collect());
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
            } => {
                let (n, c) = dims(*logits);
                let off = eps / c as f32;
                let mut dz = probs.clone();
                for r in 0..n {
                    let row = &mut dz[r * c..(r + 1) * c];
                    row.iter_mut().for_each(|v| *v = (*v - off) * g[0]);
                    row[targets[r]] -= (1.0 - eps) * g[0];
                }
                send(*logits, dz);
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                send(*x, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if needs(v) {
                        send(v, g.iter().map(|&x| (x as f64 * w) as f32).collect());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &d),
        slot @ None => *slot = Some(d),
    }
}

fn visible_keys(mask: AttnMask, query: usize) -> usize {
    if mask.causal {
        mask.key_len.min(query + 1)
    } else {
        mask.key_len
    }
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]
}

fn im2col_row(o: usize, kk: usize, kernel: usize, stride: usize, t_in: usize) -> usize {
    let pad = (kernel - 1) / 2;
    let r = (o * stride + kk) as isize - pad as isize;
    r.clamp(0, t_in as isize - 1) as usize
}
