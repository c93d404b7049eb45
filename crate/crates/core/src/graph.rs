//! Minimal reverse-mode tensor engine.
//!
//! A [`Graph`] is a tape of nodes rebuilt on every forward pass. Ops push
//! nodes that reference earlier nodes by [`TensorId`], so creation order is
//! already a topological order and `backward` is a single reverse sweep.
//! Tensors are row-major 2-D (scalars are `[1]`); that is all the encoder
//! stack needs.
//!
//! The graph also carries a [`FlopCounter`] (multiply-add counts keyed by a
//! scope path) and an allocation probe for attention score matrices; both
//! back the linear-vs-quadratic complexity checks.

use std::collections::BTreeMap;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::params::{ParamId, Parameters};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Multiply-add counts per scope path ("block0/packing/scores" style keys).
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    by_scope: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn add(&mut self, scope: &str, madds: u64) {
        *self.by_scope.entry(scope.to_string()).or_insert(0) += madds;
    }

    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    /// Sum over scope keys containing `needle`.
    pub fn matching(&self, needle: &str) -> u64 {
        self.by_scope
            .iter()
            .filter(|(k, _)| k.contains(needle))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn reset(&mut self) {
        self.by_scope.clear();
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.by_scope {
            *self.by_scope.entry(k.clone()).or_insert(0) += v;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_scope.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

enum Op<E: Elem> {
    Leaf { param: Option<ParamId> },
    MatMul { a: TensorId, b: TensorId },
    /// a[m×k] · b[n×k]ᵀ → [m×n]; avoids materializing transposes.
    MatMulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// [r×c] + bias[c] broadcast over rows; bias is a graph node.
    AddRowBroadcast { a: TensorId, bias: TensorId },
    /// [r×c] + const bias[c] broadcast over rows (no grad into the bias;
    /// the bias values are consumed at construction time).
    AddConstRows { a: TensorId },
    /// Elementwise multiply by a constant (dropout masks, validity zeroing).
    MulConst { a: TensorId, mask: Vec<E> },
    Scale { a: TensorId, c: E },
    DivConst { a: TensorId, c: E },
    /// x / exp(τ) with τ a scalar node; same elementwise division as DivConst
    /// so the two temperature modes agree bit-for-bit when exp(τ) == c.
    DivByExp { a: TensorId, tau: TensorId },
    SoftmaxRows { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    Gelu { a: TensorId },
    SliceCols { a: TensorId, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    /// Gather rows of `table` by index; grads scatter-add back.
    EmbedRows { table: TensorId, ids: Vec<usize> },
    /// Mean over rows (optionally restricted to masked-valid rows) → [1×c].
    MeanRows { a: TensorId, mask: Option<Vec<bool>>, n_valid: usize },
    /// Depthwise conv along the length axis: kernel[d×K], bias[d], zero pad.
    Conv1d { x: TensorId, kernel: TensorId, bias: TensorId, stride: usize, pad_left: usize },
    /// Max pool along the length axis; `argmax` holds the winning input row
    /// per (out_row, channel), or -1 for windows with no valid input.
    MaxPool1d { x: TensorId, argmax: Vec<i64> },
    /// Mean over batch of −log softmax(logits)[target] → scalar.
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    SumAll { a: TensorId },
}

struct Node<E: Elem> {
    shape: [usize; 2],
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    op: Op<E>,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    pub flops: FlopCounter,
    scope: Vec<String>,
    /// (rows, cols) of every attention score matrix allocated in this graph.
    score_allocs: Vec<(usize, usize)>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            flops: FlopCounter::default(),
            scope: Vec::new(),
            score_allocs: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn scope_key(&self) -> String {
        self.scope.join("/")
    }

    fn count_madds(&mut self, n: u64) {
        let key = self.scope_key();
        self.flops.add(&key, n);
    }

    pub fn note_score_alloc(&mut self, rows: usize, cols: usize) {
        self.score_allocs.push((rows, cols));
    }

    pub fn score_allocs(&self) -> &[(usize, usize)] {
        &self.score_allocs
    }

    fn push(&mut self, shape: [usize; 2], data: Vec<E>, requires_grad: bool, op: Op<E>) -> TensorId {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        id
    }

    fn node(&self, id: TensorId) -> &Node<E> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.node(id).data
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let s = self.node(id).shape;
        (s[0], s[1])
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.node(id).data.len()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    pub fn scalar_value(&self, id: TensorId) -> E {
        debug_assert_eq!(self.numel(id), 1);
        self.node(id).data[0]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<E>) -> Result<TensorId> {
        if rows * cols != data.len() {
            return Err(Error::config(format!(
                "constant: shape {rows}x{cols} does not match {} elements",
                data.len()
            )));
        }
        Ok(self.push([rows, cols], data, false, Op::Leaf { param: None }))
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if rows * cols != data.len() {
            return Err(Error::config(format!(
                "leaf: shape {rows}x{cols} does not match {} elements",
                data.len()
            )));
        }
        Ok(self.push([rows, cols], data, requires_grad, Op::Leaf { param: None }))
    }

    /// Bind a registered parameter as a graph leaf. Gradients flow back to it
    /// through [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &Parameters<E>, id: ParamId) -> TensorId {
        let p = params.get(id);
        let (r, c) = p.shape2();
        self.push([r, c], p.data.clone(), p.trainable, Op::Leaf { param: Some(id) })
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::config(format!(
                "matmul: inner extents disagree, lhs {m}x{k} vs rhs {k2}x{n}"
            )));
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        self.count_madds((m * n * k) as u64);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push([m, n], data, rg, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::config(format!(
                "matmul_nt: inner extents disagree, lhs {m}x{k} vs rhs-transposed {k2}x{n}"
            )));
        }
        let data = matmul_nt_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        self.count_madds((m * n * k) as u64);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push([m, n], data, rg, Op::MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::config(format!("add: shape mismatch {sa:?} vs {sb:?}")));
        }
        let data: Vec<E> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push([sa.0, sa.1], data, rg, Op::Add { a, b }))
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::config(format!(
                "add_row_broadcast: bias {br}x{bc} does not broadcast over {r}x{c}"
            )));
        }
        let mut data = self.node(a).data.clone();
        let bias_data = &self.node(bias).data;
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(bias_data.iter()) {
                *v = *v + b;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push([r, c], data, rg, Op::AddRowBroadcast { a, bias }))
    }

    pub fn add_const_rows(&mut self, a: TensorId, bias: Vec<E>) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if bias.len() != c {
            return Err(Error::config(format!(
                "add_const_rows: bias has {} entries, expected {c}",
                bias.len()
            )));
        }
        let mut data = self.node(a).data.clone();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(bias.iter()) {
                *v = *v + b;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push([r, c], data, rg, Op::AddConstRows { a }))
    }

    pub fn mul_const(&mut self, a: TensorId, mask: Vec<E>) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::config(format!(
                "mul_const: mask has {} entries, expected {}",
                mask.len(),
                r * c
            )));
        }
        let data: Vec<E> = self.node(a).data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.requires_grad(a);
        Ok(self.push([r, c], data, rg, Op::MulConst { a, mask }))
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> TensorId {
        let (r, cc) = self.shape(a);
        let data: Vec<E> = self.node(a).data.iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push([r, cc], data, rg, Op::Scale { a, c })
    }

    pub fn div_const(&mut self, a: TensorId, c: E) -> TensorId {
        let (r, cc) = self.shape(a);
        let data: Vec<E> = self.node(a).data.iter().map(|&x| x / c).collect();
        let rg = self.requires_grad(a);
        self.push([r, cc], data, rg, Op::DivConst { a, c })
    }

    pub fn div_by_exp(&mut self, a: TensorId, tau: TensorId) -> Result<TensorId> {
        if self.numel(tau) != 1 {
            return Err(Error::config("div_by_exp: tau must be a scalar".to_string()));
        }
        let d = self.node(tau).data[0].exp();
        let (r, c) = self.shape(a);
        let data: Vec<E> = self.node(a).data.iter().map(|&x| x / d).collect();
        let rg = self.requires_grad(a) || self.requires_grad(tau);
        Ok(self.push([r, c], data, rg, Op::DivByExp { a, tau }))
    }

    /// Row softmax with max subtraction. Rejects NaN inputs.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if c < 1 {
            return Err(Error::config("softmax_rows: empty rows".to_string()));
        }
        let mut data = vec![E::zero(); r * c];
        for (out_row, in_row) in data.chunks_mut(c).zip(self.node(a).data.chunks(c)) {
            let mut max = E::neg_infinity();
            for &x in in_row {
                if x.is_nan() {
                    return Err(Error::numeric("softmax_rows: NaN input".to_string()));
                }
                if x > max {
                    max = x;
                }
            }
            let mut sum = E::zero();
            for (o, &x) in out_row.iter_mut().zip(in_row) {
                let e = (x - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in out_row.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push([r, c], data, rg, Op::SoftmaxRows { a }))
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if self.numel(gamma) != c || self.numel(beta) != c {
            return Err(Error::config(format!(
                "layer_norm: gamma/beta must have {c} entries, got {}/{}",
                self.numel(gamma),
                self.numel(beta)
            )));
        }
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_c = E::from_f64(1.0 / c as f64);
        let mut data = vec![E::zero(); r * c];
        {
            let xs = &self.node(x).data;
            let gs = &self.node(gamma).data;
            let bs = &self.node(beta).data;
            for (out_row, in_row) in data.chunks_mut(c).zip(xs.chunks(c)) {
                let mut mean = E::zero();
                for &v in in_row {
                    mean = mean + v;
                }
                mean = mean * inv_c;
                let mut var = E::zero();
                for &v in in_row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_c;
                let inv_std = (var + eps).sqrt().recip();
                for (j, (o, &v)) in out_row.iter_mut().zip(in_row).enumerate() {
                    *o = (v - mean) * inv_std * gs[j] + bs[j];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push([r, c], data, rg, Op::LayerNorm { x, gamma, beta }))
    }

    /// Exact GELU: 0.5·x·(1 + erf(x/√2)).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<E> = self
            .node(a)
            .data
            .iter()
            .map(|&x| half * x * (E::one() + (x * inv_sqrt2).erf()))
            .collect();
        let rg = self.requires_grad(a);
        self.push([r, c], data, rg, Op::Gelu { a })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::config(format!(
                "slice_cols: [{start}, {}) out of bounds for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.node(a).data.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push([r, len], data, rg, Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols: no parts".to_string()));
        }
        let r = self.shape(parts[0]).0;
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::config(format!(
                    "concat_cols: row counts disagree ({r} vs {pr})"
                )));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                data.extend_from_slice(&self.node(p).data[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push([r, total_c], data, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn embed_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, d) = self.shape(table);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::input(format!(
                    "embed_rows: id {id} at position {pos} out of range (table has {rows} rows)"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.node(table).data[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push([ids.len(), d], data, rg, Op::EmbedRows { table, ids: ids.to_vec() }))
    }

    /// Mean over rows, optionally restricted to rows flagged valid → [1×c].
    pub fn mean_rows(&mut self, a: TensorId, mask: Option<&[bool]>) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.len() != r {
                return Err(Error::config(format!(
                    "mean_rows: mask has {} entries for {r} rows",
                    m.len()
                )));
            }
        }
        let n_valid = mask.map_or(r, |m| m.iter().filter(|&&v| v).count());
        if n_valid == 0 {
            return Err(Error::input("mean_rows: no valid rows".to_string()));
        }
        let inv = E::from_f64(1.0 / n_valid as f64);
        let mut data = vec![E::zero(); c];
        for (i, row) in self.node(a).data.chunks(c).enumerate() {
            if mask.map_or(true, |m| m[i]) {
                for (o, &v) in data.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
        }
        for o in data.iter_mut() {
            *o = *o * inv;
        }
        let rg = self.requires_grad(a);
        Ok(self.push([1, c], data, rg, Op::MeanRows { a, mask: mask.map(|m| m.to_vec()), n_valid }))
    }

    /// Depthwise conv along the length axis with zero padding.
    /// `x`: [L×d], `kernel`: [d×K] (one row of taps per channel), `bias`: [1×d].
    pub fn conv1d_depthwise(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Result<TensorId> {
        let (l, d) = self.shape(x);
        let (kd, k) = self.shape(kernel);
        if kd != d || self.numel(bias) != d {
            return Err(Error::config(format!(
                "conv1d_depthwise: kernel {kd}x{k} / bias {} incompatible with input {l}x{d}",
                self.numel(bias)
            )));
        }
        let mut data = vec![E::zero(); out_len * d];
        {
            let xs = &self.node(x).data;
            let ks = &self.node(kernel).data;
            let bs = &self.node(bias).data;
            for t in 0..out_len {
                let base = (t * stride) as i64 - pad_left as i64;
                let out_row = &mut data[t * d..(t + 1) * d];
                out_row.copy_from_slice(bs);
                for j in 0..k {
                    let src = base + j as i64;
                    if src < 0 || src >= l as i64 {
                        continue;
                    }
                    let x_row = &xs[src as usize * d..(src as usize + 1) * d];
                    for ch in 0..d {
                        out_row[ch] = out_row[ch] + ks[ch * k + j] * x_row[ch];
                    }
                }
            }
        }
        self.count_madds((out_len * d * k) as u64);
        let rg = self.requires_grad(x) || self.requires_grad(kernel) || self.requires_grad(bias);
        Ok(self.push([out_len, d], data, rg, Op::Conv1d { x, kernel, bias, stride, pad_left }))
    }

    /// Max pool along the length axis. Padding and invalid rows never win;
    /// a window with no valid input produces 0 (and routes no gradient).
    pub fn maxpool1d(
        &mut self,
        x: TensorId,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        out_len: usize,
        valid: Option<&[bool]>,
    ) -> Result<TensorId> {
        let (l, d) = self.shape(x);
        if let Some(v) = valid {
            if v.len() != l {
                return Err(Error::config(format!(
                    "maxpool1d: validity mask has {} entries for {l} rows",
                    v.len()
                )));
            }
        }
        let mut data = vec![E::zero(); out_len * d];
        let mut argmax = vec![-1i64; out_len * d];
        {
            let xs = &self.node(x).data;
            for t in 0..out_len {
                let base = (t * stride) as i64 - pad_left as i64;
                for ch in 0..d {
                    let mut best = E::neg_infinity();
                    let mut best_src = -1i64;
                    for j in 0..kernel {
                        let src = base + j as i64;
                        if src < 0 || src >= l as i64 {
                            continue;
                        }
                        if valid.map_or(false, |v| !v[src as usize]) {
                            continue;
                        }
                        let v = xs[src as usize * d + ch];
                        if v > best {
                            best = v;
                            best_src = src;
                        }
                    }
                    if best_src >= 0 {
                        data[t * d + ch] = best;
                        argmax[t * d + ch] = best_src;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push([out_len, d], data, rg, Op::MaxPool1d { x, argmax }))
    }

    /// Mean over the batch of −log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (b, c) = self.shape(logits);
        if targets.len() != b {
            return Err(Error::usage(format!(
                "cross_entropy: {} targets for {b} logit rows",
                targets.len()
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::input(format!(
                    "cross_entropy: target {t} at row {i} out of range for {c} classes"
                )));
            }
        }
        let mut total = E::zero();
        for (row, &t) in self.node(logits).data.chunks(c).zip(targets) {
            let mut max = E::neg_infinity();
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = E::zero();
            for &x in row {
                sum = sum + (x - max).exp();
            }
            total = total - (row[t] - max - sum.ln());
        }
        let loss = total / E::from_f64(b as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push([1, 1], vec![loss], rg, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut s = E::zero();
        for &x in &self.node(a).data {
            s = s + x;
        }
        let rg = self.requires_grad(a);
        self.push([1, 1], vec![s], rg, Op::SumAll { a })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// every requires-grad node reachable from the loss ends up populated.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            let (r, c) = self.shape(loss);
            return Err(Error::usage(format!("backward: loss must be scalar, got {r}x{c}")));
        }
        if !self.node(loss).requires_grad {
            // Constant loss: nothing depends on parameters.
            return Ok(());
        }
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![E::zero(); node.data.len()]);
            }
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, target: TensorId, delta: &[E]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let grad = self.nodes[target.0]
            .grad
            .get_or_insert_with(|| vec![E::zero(); delta.len()]);
        for (a, &b) in grad.iter_mut().zip(delta) {
            *a = *a + b;
        }
    }

    fn propagate(&mut self, i: usize, g: &[E]) {
        // The op is cheap to match on; data is borrowed per-branch.
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                // dA = G · Bᵀ, dB = Aᵀ · G
                let da = matmul_nt_raw(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn_raw(&self.nodes[a.0].data, g, m, k, n);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = self.shape(b).0;
                // C = A·Bᵀ ⇒ dA = G·B, dB = Gᵀ·A
                let da = matmul_raw(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn_raw(g, &self.nodes[a.0].data, m, n, k);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddRowBroadcast { a, bias } => {
                let (a, bias) = (*a, *bias);
                let c = self.shape(a).1;
                self.add_grad(a, g);
                let mut db = vec![E::zero(); c];
                for row in g.chunks(c) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.add_grad(bias, &db);
            }
            Op::AddConstRows { a } => {
                let a = *a;
                self.add_grad(a, g);
            }
            Op::MulConst { a, mask } => {
                let a = *a;
                let da: Vec<E> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.add_grad(a, &da);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<E> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(a, &da);
            }
            Op::DivConst { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<E> = g.iter().map(|&gv| gv / c).collect();
                self.add_grad(a, &da);
            }
            Op::DivByExp { a, tau } => {
                let (a, tau) = (*a, *tau);
                let d = self.nodes[tau.0].data[0].exp();
                let da: Vec<E> = g.iter().map(|&gv| gv / d).collect();
                // out = x·exp(−τ) ⇒ ∂out/∂τ = −out
                let mut dtau = E::zero();
                for (&gv, &ov) in g.iter().zip(&self.nodes[i].data) {
                    dtau = dtau - gv * ov;
                }
                self.add_grad(a, &da);
                self.add_grad(tau, &[dtau]);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let c = self.shape(a).1;
                let mut da = vec![E::zero(); g.len()];
                for ((da_row, g_row), s_row) in da
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(self.nodes[i].data.chunks(c))
                {
                    let mut dot = E::zero();
                    for (&gv, &sv) in g_row.iter().zip(s_row) {
                        dot = dot + gv * sv;
                    }
                    for ((o, &gv), &sv) in da_row.iter_mut().zip(g_row).zip(s_row) {
                        *o = sv * (gv - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = self.shape(x);
                let eps = E::from_f64(LAYER_NORM_EPS);
                let inv_c = E::from_f64(1.0 / c as f64);
                let mut dx = vec![E::zero(); r * c];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                {
                    let xs = &self.nodes[x.0].data;
                    let gs = &self.nodes[gamma.0].data;
                    for (row_idx, (x_row, g_row)) in xs.chunks(c).zip(g.chunks(c)).enumerate() {
                        let mut mean = E::zero();
                        for &v in x_row {
                            mean = mean + v;
                        }
                        mean = mean * inv_c;
                        let mut var = E::zero();
                        for &v in x_row {
                            let d = v - mean;
                            var = var + d * d;
                        }
                        var = var * inv_c;
                        let inv_std = (var + eps).sqrt().recip();

                        let mut dxhat = vec![E::zero(); c];
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..c {
                            let xhat = (x_row[j] - mean) * inv_std;
                            dgamma[j] = dgamma[j] + g_row[j] * xhat;
                            dbeta[j] = dbeta[j] + g_row[j];
                            let dh = g_row[j] * gs[j];
                            dxhat[j] = dh;
                            sum_dxhat = sum_dxhat + dh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dh * xhat;
                        }
                        let dx_row = &mut dx[row_idx * c..(row_idx + 1) * c];
                        for j in 0..c {
                            let xhat = (x_row[j] - mean) * inv_std;
                            dx_row[j] =
                                inv_std * (dxhat[j] - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::Gelu { a } => {
                let a = *a;
                let half = E::from_f64(0.5);
                let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                // d/dx [0.5·x·(1+erf(x/√2))] = 0.5·(1+erf(x/√2)) + x·φ(x)
                let coef = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &x)| {
                        let cdf_term = half * (E::one() + (x * inv_sqrt2).erf());
                        let pdf = coef * (-half * x * x).exp();
                        gv * (cdf_term + x * pdf)
                    })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (r, c) = self.shape(a);
                let mut da = vec![E::zero(); r * c];
                for (row_idx, g_row) in g.chunks(len).enumerate() {
                    da[row_idx * c + start..row_idx * c + start + len].copy_from_slice(g_row);
                }
                self.add_grad(a, &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total_c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut offset = 0;
                for &p in &parts {
                    let (pr, pc) = self.shape(p);
                    let mut dp = Vec::with_capacity(pr * pc);
                    for row_idx in 0..pr {
                        dp.extend_from_slice(&g[row_idx * total_c + offset..row_idx * total_c + offset + pc]);
                    }
                    self.add_grad(p, &dp);
                    offset += pc;
                }
            }
            Op::EmbedRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let (rows, d) = self.shape(table);
                let mut dt = vec![E::zero(); rows * d];
                for (pos, &id) in ids.iter().enumerate() {
                    let g_row = &g[pos * d..(pos + 1) * d];
                    let t_row = &mut dt[id * d..(id + 1) * d];
                    for (o, &v) in t_row.iter_mut().zip(g_row) {
                        *o = *o + v;
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::MeanRows { a, mask, n_valid } => {
                let (a, n_valid) = (*a, *n_valid);
                let mask = mask.clone();
                let (r, c) = self.shape(a);
                let inv = E::from_f64(1.0 / n_valid as f64);
                let mut da = vec![E::zero(); r * c];
                for (row_idx, da_row) in da.chunks_mut(c).enumerate() {
                    if mask.as_ref().map_or(true, |m| m[row_idx]) {
                        for (o, &gv) in da_row.iter_mut().zip(g) {
                            *o = gv * inv;
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Conv1d { x, kernel, bias, stride, pad_left } => {
                let (x, kernel, bias, stride, pad_left) = (*x, *kernel, *bias, *stride, *pad_left);
                let (l, d) = self.shape(x);
                let k = self.shape(kernel).1;
                let out_len = self.nodes[i].data.len() / d;
                let mut dx = vec![E::zero(); l * d];
                let mut dk = vec![E::zero(); d * k];
                let mut db = vec![E::zero(); d];
                {
                    let xs = &self.nodes[x.0].data;
                    let ks = &self.nodes[kernel.0].data;
                    for t in 0..out_len {
                        let base = (t * stride) as i64 - pad_left as i64;
                        let g_row = &g[t * d..(t + 1) * d];
                        for (o, &gv) in db.iter_mut().zip(g_row) {
                            *o = *o + gv;
                        }
                        for j in 0..k {
                            let src = base + j as i64;
                            if src < 0 || src >= l as i64 {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..d {
                                dk[ch * k + j] = dk[ch * k + j] + g_row[ch] * xs[s * d + ch];
                                dx[s * d + ch] = dx[s * d + ch] + g_row[ch] * ks[ch * k + j];
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(kernel, &dk);
                self.add_grad(bias, &db);
            }
            Op::MaxPool1d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let (l, d) = self.shape(x);
                let mut dx = vec![E::zero(); l * d];
                for (flat, &src) in argmax.iter().enumerate() {
                    if src >= 0 {
                        let ch = flat % d;
                        dx[src as usize * d + ch] = dx[src as usize * d + ch] + g[flat];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (b, c) = self.shape(logits);
                let scale = g[0] / E::from_f64(b as f64);
                let mut dl = vec![E::zero(); b * c];
                for ((dl_row, row), &t) in dl
                    .chunks_mut(c)
                    .zip(self.nodes[logits.0].data.chunks(c))
                    .zip(&targets)
                {
                    let mut max = E::neg_infinity();
                    for &v in row {
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = E::zero();
                    for &v in row {
                        sum = sum + (v - max).exp();
                    }
                    for (j, (o, &v)) in dl_row.iter_mut().zip(row).enumerate() {
                        let p = (v - max).exp() / sum;
                        let onehot = if j == t { E::one() } else { E::zero() };
                        *o = scale * (p - onehot);
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::SumAll { a } => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.add_grad(a, &da);
            }
        }
    }

    /// Add this graph's parameter-leaf gradients into `out` (indexed by
    /// parameter id). Used to merge per-sample graphs deterministically.
    pub fn accumulate_param_grads(&self, out: &mut [Vec<E>]) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &node.grad {
                    let target = &mut out[pid.index()];
                    for (a, &b) in target.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

/// C[m×n] = A[m×k]·B[k×n], ikj order for cache-friendly row updates.
pub fn matmul_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// C[m×n] = A[m×k]·B[n×k]ᵀ (row-dot-row).
pub fn matmul_nt_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s = s + av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ·B[m×n].
pub fn matmul_tn_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// Same-coverage padding: every input position is covered by some window and
/// the output length is ceil(L/S). Returns (pad_left, out_len).
pub fn same_coverage_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out_len = len.div_ceil(stride);
    let span = (out_len - 1) * stride + kernel;
    let pad_total = span.saturating_sub(len);
    (pad_total / 2, out_len)
}
