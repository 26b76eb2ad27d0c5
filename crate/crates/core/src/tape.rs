//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one step's differentiable operations in execution
//! order; each entry carries the forward value and a backward closure that
//! scatters the output gradient into its parents. [`Tape::backward`] replays
//! the entries in strict reverse order exactly once, accumulating gradients
//! for every watched leaf. Tapes are owned by a single step and never shared
//! across threads.
//!
//! Ops treat tensors as row-major 2-D matrices; a 1-D tensor of length `n`
//! acts as a single row (`1 x n`). A [`Var`] is only meaningful on the tape
//! that created it.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{same_shape, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

type BackFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Entry {
    value: Tensor,
    needs_grad: bool,
    is_leaf: bool,
    backward: Option<BackFn>,
}

/// Per-variable gradient accumulator used during the backward sweep.
pub struct GradSink {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradSink {
    #[inline]
    fn slot(&mut self, var: Var, numel: usize) -> &mut [f64] {
        self.slots[var.index].get_or_insert_with(|| vec![0.0; numel])
    }
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    tape: u64,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`. Watched leaves that the loss never
    /// touched report zeros; non-watched vars report `None`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        debug_assert_eq!(var.tape, self.tape, "gradient lookup crossed tapes");
        self.slots[var.index].as_deref()
    }
}

pub struct Tape {
    id: u64,
    grad_enabled: bool,
    entries: RefCell<Vec<Entry>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            entries: RefCell::new(Vec::new()),
        }
    }

    /// A forward-only tape: same ops, no closures, no gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor, needs_grad: bool, is_leaf: bool, backward: Option<BackFn>) -> Var {
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry {
            value,
            needs_grad,
            is_leaf,
            backward,
        });
        Var {
            index: entries.len() - 1,
            tape: self.id,
        }
    }

    /// Watch a tensor; it participates in gradients iff `requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let needs = self.grad_enabled && t.requires_grad();
        self.push(t.clone(), needs, true, None)
    }

    /// Record a value that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.clone(), false, true, None)
    }

    /// The forward value of `var` (cheap clone; data is shared).
    pub fn value(&self, var: Var) -> Tensor {
        debug_assert_eq!(var.tape, self.id, "Var used on a foreign tape");
        self.entries.borrow()[var.index].value.clone()
    }

    fn needs(&self, var: Var) -> bool {
        self.entries.borrow()[var.index].needs_grad
    }

    fn record(&self, out: Tensor, parents_need: bool, back: impl Fn(&[f64], &mut GradSink) + 'static) -> Var {
        let needs = self.grad_enabled && parents_need;
        let back: Option<BackFn> = if needs { Some(Box::new(back)) } else { None };
        self.push(out, needs, false, back)
    }

    // ── Arithmetic ─────────────────────────────────────────────────────

    /// `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let (ad, bd) = (ta.data(), tb.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av != 0.0 {
                        let brow = &bd[p * n..(p + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
            }
        }
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        Ok(self.record(
            Tensor::new(vec![m, n], out)?,
            need_a || need_b,
            move |gout, sink| {
                if need_a {
                    let bd = tb.data();
                    let da = sink.slot(a, m * k);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                if need_b {
                    let ad = ta.data();
                    let db = sink.slot(b, k * n);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", &ta, &tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let numel = out.len();
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        Ok(self.record(
            Tensor::new(ta.shape().to_vec(), out)?,
            need_a || need_b,
            move |gout, sink| {
                if need_a {
                    let da = sink.slot(a, numel);
                    for (d, g) in da.iter_mut().zip(gout) {
                        *d += g;
                    }
                }
                if need_b {
                    let db = sink.slot(b, numel);
                    for (d, g) in db.iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            },
        ))
    }

    /// Elementwise `a * b` (same shape).
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", &ta, &tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let numel = out.len();
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        Ok(self.record(
            Tensor::new(ta.shape().to_vec(), out)?,
            need_a || need_b,
            move |gout, sink| {
                if need_a {
                    let da = sink.slot(a, numel);
                    for i in 0..numel {
                        da[i] += gout[i] * tb.data()[i];
                    }
                }
                if need_b {
                    let db = sink.slot(b, numel);
                    for i in 0..numel {
                        db[i] += gout[i] * ta.data()[i];
                    }
                }
            },
        ))
    }

    /// `x * k` for a compile-time-known scalar.
    pub fn scale(&self, x: Var, k: f64) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| v * k).collect();
        let numel = out.len();
        let need = self.needs(x);
        self.record(
            Tensor::new(tx.shape().to_vec(), out).expect("scale preserves shape"),
            need,
            move |gout, sink| {
                let dx = sink.slot(x, numel);
                for i in 0..numel {
                    dx[i] += gout[i] * k;
                }
            },
        )
    }

    /// Broadcast-add a length-`n` bias to every row of `x[m,n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = (tx.rows(), tx.cols());
        if tb.numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        let (need_x, need_b) = (self.needs(x), self.needs(bias));
        Ok(self.record(
            Tensor::new(tx.shape().to_vec(), out)?,
            need_x || need_b,
            move |gout, sink| {
                if need_x {
                    let dx = sink.slot(x, m * n);
                    for (d, g) in dx.iter_mut().zip(gout) {
                        *d += g;
                    }
                }
                if need_b {
                    let db = sink.slot(bias, n);
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j];
                        }
                    }
                }
            },
        ))
    }

    // ── Activations ────────────────────────────────────────────────────

    pub fn sigmoid(&self, x: Var) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let y = Tensor::new(tx.shape().to_vec(), out).expect("sigmoid preserves shape");
        let numel = y.numel();
        let need = self.needs(x);
        let yc = y.clone();
        self.record(y, need, move |gout, sink| {
            let dx = sink.slot(x, numel);
            for i in 0..numel {
                let v = yc.data()[i];
                dx[i] += gout[i] * v * (1.0 - v);
            }
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| v.tanh()).collect();
        let y = Tensor::new(tx.shape().to_vec(), out).expect("tanh preserves shape");
        let numel = y.numel();
        let need = self.needs(x);
        let yc = y.clone();
        self.record(y, need, move |gout, sink| {
            let dx = sink.slot(x, numel);
            for i in 0..numel {
                let v = yc.data()[i];
                dx[i] += gout[i] * (1.0 - v * v);
            }
        })
    }

    // ── Shape surgery ──────────────────────────────────────────────────

    /// Columns `[start, start+width)` of `x`.
    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start + width > n || width == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&tx.data()[i * n + start..i * n + start + width]);
        }
        let need = self.needs(x);
        Ok(self.record(
            Tensor::new(vec![m, width], out)?,
            need,
            move |gout, sink| {
                let dx = sink.slot(x, m * n);
                for i in 0..m {
                    for j in 0..width {
                        dx[i * n + start + j] += gout[i * width + j];
                    }
                }
            },
        ))
    }

    /// Concatenate equal-height matrices side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let m = tensors[0].rows();
        for t in &tensors {
            if t.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: tensors[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = tensors.iter().map(|t| t.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for t in &tensors {
                let n = t.cols();
                out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let parents: Vec<(Var, bool)> = parts.iter().map(|&p| (p, self.needs(p))).collect();
        let any = parents.iter().any(|&(_, n)| n);
        let widths_b = widths.clone();
        Ok(self.record(
            Tensor::new(vec![m, total], out)?,
            any,
            move |gout, sink| {
                let mut offset = 0;
                for (&(p, need), &w) in parents.iter().zip(&widths_b) {
                    if need {
                        let dp = sink.slot(p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += gout[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            },
        ))
    }

    /// Stack equal-width matrices on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let n = tensors[0].cols();
        for t in &tensors {
            if t.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: tensors[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let heights: Vec<usize> = tensors.iter().map(|t| t.rows()).collect();
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for t in &tensors {
            out.extend_from_slice(t.data());
        }
        let parents: Vec<(Var, bool)> = parts.iter().map(|&p| (p, self.needs(p))).collect();
        let any = parents.iter().any(|&(_, need)| need);
        Ok(self.record(
            Tensor::new(vec![total, n], out)?,
            any,
            move |gout, sink| {
                let mut offset = 0;
                for (&(p, need), &h) in parents.iter().zip(&heights) {
                    if need {
                        let dp = sink.slot(p, h * n);
                        for (d, g) in dp.iter_mut().zip(&gout[offset * n..(offset + h) * n]) {
                            *d += g;
                        }
                    }
                    offset += h;
                }
            },
        ))
    }

    /// Gather rows of an embedding table: `out[r] = table[ids[r]]`.
    pub fn embed(&self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (v, e) = (tt.rows(), tt.cols());
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!(
                    "embedding id {id} out of range for table of {v} rows"
                )));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&tt.data()[id as usize * e..(id as usize + 1) * e]);
        }
        let n = ids.len();
        let ids_b: Vec<u32> = ids.to_vec();
        let need = self.needs(table);
        Ok(self.record(
            Tensor::new(vec![n, e], out)?,
            need,
            move |gout, sink| {
                let dt = sink.slot(table, v * e);
                for (r, &id) in ids_b.iter().enumerate() {
                    let dst = &mut dt[id as usize * e..(id as usize + 1) * e];
                    for (d, g) in dst.iter_mut().zip(&gout[r * e..(r + 1) * e]) {
                        *d += g;
                    }
                }
            },
        ))
    }

    // ── Attention ──────────────────────────────────────────────────────

    /// Dot-product scores of a query batch against per-position states:
    /// `out[b,s] = queries[b,:] . states[s][b,:]`.
    pub fn attn_scores(&self, queries: Var, states: &[Var]) -> Result<Var> {
        let tq = self.value(queries);
        let (bsz, d) = (tq.rows(), tq.cols());
        let ts: Vec<Tensor> = states.iter().map(|&s| self.value(s)).collect();
        for t in &ts {
            if t.rows() != bsz || t.cols() != d {
                return Err(Error::Shape {
                    op: "attn_scores",
                    lhs: tq.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let s_len = ts.len();
        let mut out = vec![0.0; bsz * s_len];
        for (s, t) in ts.iter().enumerate() {
            for b in 0..bsz {
                let mut acc = 0.0;
                let qrow = &tq.data()[b * d..(b + 1) * d];
                let srow = &t.data()[b * d..(b + 1) * d];
                for k in 0..d {
                    acc += qrow[k] * srow[k];
                }
                out[b * s_len + s] = acc;
            }
        }
        let need_q = self.needs(queries);
        let parents: Vec<(Var, bool)> = states.iter().map(|&p| (p, self.needs(p))).collect();
        let any = need_q || parents.iter().any(|&(_, n)| n);
        Ok(self.record(
            Tensor::new(vec![bsz, s_len], out)?,
            any,
            move |gout, sink| {
                if need_q {
                    let dq = sink.slot(queries, bsz * d);
                    for (s, t) in ts.iter().enumerate() {
                        for b in 0..bsz {
                            let g = gout[b * s_len + s];
                            if g != 0.0 {
                                let srow = &t.data()[b * d..(b + 1) * d];
                                let drow = &mut dq[b * d..(b + 1) * d];
                                for k in 0..d {
                                    drow[k] += g * srow[k];
                                }
                            }
                        }
                    }
                }
                for (s, &(p, need)) in parents.iter().enumerate() {
                    if need {
                        let dp = sink.slot(p, bsz * d);
                        for b in 0..bsz {
                            let g = gout[b * s_len + s];
                            if g != 0.0 {
                                let qrow = &tq.data()[b * d..(b + 1) * d];
                                let drow = &mut dp[b * d..(b + 1) * d];
                                for k in 0..d {
                                    drow[k] += g * qrow[k];
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Attention-weighted sum of per-position states:
    /// `out[b,:] = sum_s weights[b,s] * states[s][b,:]`.
    pub fn weighted_sum(&self, weights: Var, states: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        let (bsz, s_len) = (tw.rows(), tw.cols());
        if s_len != states.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: tw.shape().to_vec(),
                rhs: vec![states.len()],
            });
        }
        let ts: Vec<Tensor> = states.iter().map(|&s| self.value(s)).collect();
        let d = ts.first().map(|t| t.cols()).unwrap_or(0);
        for t in &ts {
            if t.rows() != bsz || t.cols() != d {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    lhs: vec![bsz, d],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; bsz * d];
        for (s, t) in ts.iter().enumerate() {
            for b in 0..bsz {
                let w = tw.data()[b * s_len + s];
                if w != 0.0 {
                    let srow = &t.data()[b * d..(b + 1) * d];
                    let orow = &mut out[b * d..(b + 1) * d];
                    for k in 0..d {
                        orow[k] += w * srow[k];
                    }
                }
            }
        }
        let need_w = self.needs(weights);
        let parents: Vec<(Var, bool)> = states.iter().map(|&p| (p, self.needs(p))).collect();
        let any = need_w || parents.iter().any(|&(_, n)| n);
        Ok(self.record(
            Tensor::new(vec![bsz, d], out)?,
            any,
            move |gout, sink| {
                if need_w {
                    let dw = sink.slot(weights, bsz * s_len);
                    for (s, t) in ts.iter().enumerate() {
                        for b in 0..bsz {
                            let grow = &gout[b * d..(b + 1) * d];
                            let srow = &t.data()[b * d..(b + 1) * d];
                            let mut acc = 0.0;
                            for k in 0..d {
                                acc += grow[k] * srow[k];
                            }
                            dw[b * s_len + s] += acc;
                        }
                    }
                }
                for (s, &(p, need)) in parents.iter().enumerate() {
                    if need {
                        let dp = sink.slot(p, bsz * d);
                        for b in 0..bsz {
                            let w = tw.data()[b * s_len + s];
                            if w != 0.0 {
                                let grow = &gout[b * d..(b + 1) * d];
                                let drow = &mut dp[b * d..(b + 1) * d];
                                for k in 0..d {
                                    drow[k] += w * grow[k];
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    // ── Softmax ────────────────────────────────────────────────────────

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let rows = self.value(x).rows();
        self.softmax_rows_masked(x, &vec![cols; rows])
            .expect("full-width mask is always valid")
    }

    /// Row-wise softmax over the first `valid[r]` columns of row `r`;
    /// remaining entries are exactly zero and receive no gradient.
    pub fn softmax_rows_masked(&self, x: Var, valid: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if valid.len() != m {
            return Err(Error::Input(format!(
                "softmax mask has {} rows for a {m}-row input",
                valid.len()
            )));
        }
        for (r, &v) in valid.iter().enumerate() {
            if v == 0 || v > n {
                return Err(Error::Input(format!(
                    "softmax mask {v} invalid for row {r} of width {n}"
                )));
            }
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let w = valid[r];
            let row = &tx.data()[r * n..r * n + w];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * n..r * n + w];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let y = Tensor::new(vec![m, n], out)?;
        let yc = y.clone();
        let valid_b: Vec<usize> = valid.to_vec();
        let need = self.needs(x);
        Ok(self.record(y, need, move |gout, sink| {
            let dx = sink.slot(x, m * n);
            for r in 0..m {
                let w = valid_b[r];
                let yrow = &yc.data()[r * n..r * n + w];
                let grow = &gout[r * n..r * n + w];
                let mut dot = 0.0;
                for k in 0..w {
                    dot += grow[k] * yrow[k];
                }
                let drow = &mut dx[r * n..r * n + w];
                for k in 0..w {
                    drow[k] += yrow[k] * (grow[k] - dot);
                }
            }
        }))
    }

    // ── Regularization and loss ────────────────────────────────────────

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by `1/(1-rate)`; in evaluation, identity.
    pub fn dropout(&self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParam(format!(
                "dropout rate {rate} must lie in [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let numel = out.len();
        let need = self.needs(x);
        Ok(self.record(
            Tensor::new(tx.shape().to_vec(), out)?,
            need,
            move |gout, sink| {
                let dx = sink.slot(x, numel);
                for i in 0..numel {
                    dx[i] += gout[i] * mask[i];
                }
            },
        ))
    }

    /// Label-smoothed cross-entropy, averaged over non-padding positions.
    ///
    /// With smoothing `eps`, the target distribution is
    /// `q = (1-eps) * onehot + eps / V`, so the per-row loss is
    /// `-( (1-eps) log p[target] + eps/V * sum_v log p[v] )`.
    /// Rows whose target equals `pad` are excluded from the average.
    pub fn label_smoothed_ce(
        &self,
        logits: Var,
        targets: &[u32],
        pad: u32,
        smoothing: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidParam(format!(
                "label smoothing {smoothing} must lie in [0, 1)"
            )));
        }
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::Input(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        for &t in targets {
            if t != pad && t as usize >= v {
                return Err(Error::Index(format!(
                    "target id {t} out of range for vocabulary of {v}"
                )));
            }
        }
        let active: Vec<bool> = targets.iter().map(|&t| t != pad).collect();
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::Input("no non-padding targets in loss".into()));
        }
        // Forward pass keeps the probabilities around for the backward rule
        // dlogits = (p - q) / count.
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut logp_sum = 0.0;
            for (k, &x) in row.iter().enumerate() {
                let logp = x - lse;
                logp_sum += logp;
                prow[k] = logp.exp();
            }
            let logp_target = row[targets[r] as usize] - lse;
            total += -((1.0 - smoothing) * logp_target + smoothing / v as f64 * logp_sum);
        }
        let loss = total / count as f64;
        let targets_b: Vec<u32> = targets.to_vec();
        let need = self.needs(logits);
        Ok(self.record(Tensor::scalar(loss), need, move |gout, sink| {
            let g = gout[0] / count as f64;
            let dl = sink.slot(logits, n * v);
            let uniform = smoothing / v as f64;
            for r in 0..n {
                if !active[r] {
                    continue;
                }
                let prow = &probs[r * v..(r + 1) * v];
                let drow = &mut dl[r * v..(r + 1) * v];
                for k in 0..v {
                    let q = if k == targets_b[r] as usize {
                        1.0 - smoothing + uniform
                    } else {
                        uniform
                    };
                    drow[k] += g * (prow[k] - q);
                }
            }
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let tx = self.value(x);
        let total: f64 = tx.data().iter().sum();
        let numel = tx.numel();
        let need = self.needs(x);
        self.record(Tensor::scalar(total), need, move |gout, sink| {
            let dx = sink.slot(x, numel);
            for d in dx.iter_mut() {
                *d += gout[0];
            }
        })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar `loss` for every watched leaf.
    /// Entries are visited in strict reverse execution order exactly once;
    /// watched leaves the loss never touched receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        debug_assert_eq!(loss.tape, self.id, "Var used on a foreign tape");
        if !self.grad_enabled {
            return Err(Error::Contract(
                "backward called on an inference tape".into(),
            ));
        }
        let entries = self.entries.borrow();
        if entries[loss.index].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss; got shape {:?}",
                entries[loss.index].value.shape()
            )));
        }
        let mut sink = GradSink {
            slots: vec![None; entries.len()],
        };
        sink.slots[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            if let Some(g) = sink.slots[i].take() {
                if let Some(back) = &entries[i].backward {
                    back(&g, &mut sink);
                }
                sink.slots[i] = Some(g);
            }
        }
        // Zero-fill watched leaves the loss never reached.
        for (i, e) in entries.iter().enumerate() {
            if e.is_leaf && e.needs_grad && sink.slots[i].is_none() {
                sink.slots[i] = Some(vec![0.0; e.value.numel()]);
            }
        }
        Ok(Gradients {
            slots: sink.slots,
            tape: self.id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(vec![5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![7, 3], -1.0, 1.0, &mut rng);
        let tape = Tape::inference();
        let c = tape
            .matmul(tape.constant(&a), tape.constant(&b))
            .unwrap();
        let got = tape.value(c);
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for p in 0..7 {
                    want += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(&t2(2, 3, vec![0.0; 6]));
        let b = tape.constant(&t2(4, 2, vec![0.0; 8]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zero_ln2_is_one_third_two_thirds() {
        let tape = Tape::inference();
        let x = tape.constant(&t2(1, 2, vec![0.0, 2.0f64.ln()]));
        let y = tape.value(tape.softmax_rows(x));
        assert!((y.data()[0] - 1.0 / 3.0).abs() <= 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_padding_and_its_gradient() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 3], vec![0.5, 0.5, 9.0, 0.0, 1.0, 2.0])
            .unwrap()
            .with_grad();
        let xv = tape.leaf(&x);
        let y = tape.softmax_rows_masked(xv, &[2, 3]).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.data()[2], 0.0, "masked column must be exactly zero");
        assert!((yv.data()[0] - 0.5).abs() <= 1e-12);
        assert!((yv.data()[1] - 0.5).abs() <= 1e-12);
        let row1: f64 = yv.data()[3..6].iter().sum();
        assert!((row1 - 1.0).abs() <= 1e-12);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(xv).unwrap();
        assert_eq!(gx[2], 0.0, "masked column must receive no gradient");
    }

    #[test]
    fn cross_entropy_hand_values() {
        // Uniform logits over V classes: loss = ln V regardless of smoothing.
        let tape = Tape::inference();
        let logits = tape.constant(&t2(1, 4, vec![0.0; 4]));
        let loss = tape.label_smoothed_ce(logits, &[2], 99, 0.1).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() <= 1e-12);

        // Logits [0, ln 3], target 1, no smoothing: p(target) = 3/4,
        // so the loss is ln(4/3).
        let logits = tape.constant(&t2(1, 2, vec![0.0, 3.0f64.ln()]));
        let loss = tape.label_smoothed_ce(logits, &[1], 99, 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - (4.0f64 / 3.0).ln()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_skips_padding_rows() {
        let tape = Tape::new();
        let raw = t2(2, 3, vec![0.3, -0.4, 1.1, 5.0, 5.0, 5.0]).with_grad();
        let logits = tape.leaf(&raw);
        let both = tape.label_smoothed_ce(logits, &[2, 0], 0, 0.1).unwrap();
        let tape2 = Tape::inference();
        let only = tape2
            .label_smoothed_ce(tape2.constant(&t2(1, 3, vec![0.3, -0.4, 1.1])), &[2], 0, 0.1)
            .unwrap();
        assert!(
            (tape.value(both).data()[0] - tape2.value(only).data()[0]).abs() <= 1e-12,
            "padding row must not contribute to the loss"
        );
        let grads = tape.backward(both).unwrap();
        let g = grads.get(logits).unwrap();
        assert!(g[3..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_smoothed_target() {
        let tape = Tape::new();
        let raw = t2(1, 2, vec![0.0, 3.0f64.ln()]).with_grad();
        let logits = tape.leaf(&raw);
        let loss = tape.label_smoothed_ce(logits, &[1], 99, 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        // p = [1/4, 3/4], q = [0, 1], count = 1.
        assert!((g[0] - 0.25).abs() <= 1e-12);
        assert!((g[1] - (-0.25)).abs() <= 1e-12);
    }

    #[test]
    fn dropout_drops_the_configured_fraction_and_rescales() {
        let mut rng = Rng::new(7);
        let tape = Tape::inference();
        let n = 1_000_000;
        let x = tape.constant(&Tensor::new(vec![n], vec![1.0; n]).unwrap());
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        let data = tape.value(y);
        let zeros = data.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!(
            (0.295..=0.305).contains(&frac),
            "dropped fraction {frac} not near 0.3"
        );
        let survivor = data.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.7).abs() <= 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_evaluation() {
        let mut rng = Rng::new(7);
        let tape = Tape::inference();
        let x = tape.constant(&t2(1, 3, vec![1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y, "evaluation-mode dropout must pass through");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = t2(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.5]).with_grad();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let tape = Tape::new();
        let x = t2(1, 4, vec![0.5, -1.0, 2.0, 0.25]).with_grad();
        let xv = tape.leaf(&x);
        let loss = tape.sum(tape.mul(xv, xv).unwrap());
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.get(xv).unwrap().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = t2(1, 2, vec![1.0, 2.0]).with_grad();
        let xv = tape.leaf(&x);
        match tape.backward(xv) {
            Err(Error::Contract(msg)) => assert!(msg.contains("scalar")),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn untouched_watched_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = t2(1, 2, vec![1.0, 2.0]).with_grad();
        let unused = t2(1, 3, vec![5.0, 6.0, 7.0]).with_grad();
        let xv = tape.leaf(&x);
        let uv = tape.leaf(&unused);
        let loss = tape.sum(xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(uv).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // loss = sum(x + x) => d/dx = 2.
        let tape = Tape::new();
        let x = t2(1, 2, vec![3.0, -1.0]).with_grad();
        let xv = tape.leaf(&x);
        let loss = tape.sum(tape.add(xv, xv).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn attention_ops_match_explicit_loops() {
        let mut rng = Rng::new(3);
        let tape = Tape::inference();
        let (b, d, s) = (2, 4, 3);
        let q = Tensor::uniform(vec![b, d], -1.0, 1.0, &mut rng);
        let states: Vec<Tensor> = (0..s)
            .map(|_| Tensor::uniform(vec![b, d], -1.0, 1.0, &mut rng))
            .collect();
        let qv = tape.constant(&q);
        let svs: Vec<Var> = states.iter().map(|t| tape.constant(t)).collect();
        let scores = tape.value(tape.attn_scores(qv, &svs).unwrap());
        for bi in 0..b {
            for si in 0..s {
                let mut want = 0.0;
                for k in 0..d {
                    want += q.data()[bi * d + k] * states[si].data()[bi * d + k];
                }
                assert!((scores.data()[bi * s + si] - want).abs() <= 1e-12);
            }
        }
        let w = Tensor::uniform(vec![b, s], 0.0, 1.0, &mut rng);
        let ctx = tape.value(tape.weighted_sum(tape.constant(&w), &svs).unwrap());
        for bi in 0..b {
            for k in 0..d {
                let mut want = 0.0;
                for si in 0..s {
                    want += w.data()[bi * s + si] * states[si].data()[bi * d + k];
                }
                assert!((ctx.data()[bi * d + k] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_out_of_range_and_scatters_gradient() {
        let tape = Tape::new();
        let table = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let tv = tape.leaf(&table);
        assert!(matches!(tape.embed(tv, &[3]), Err(Error::Index(_))));
        let e = tape.embed(tv, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(e);
        let grads = tape.backward(loss).unwrap();
        // Row 1 gathered twice, row 0 once, row 2 never.
        assert_eq!(grads.get(tv).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let tape = Tape::new();
        let x = t2(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).with_grad();
        let xv = tape.leaf(&x);
        let left = tape.slice_cols(xv, 0, 2).unwrap();
        let right = tape.slice_cols(xv, 2, 2).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
        let stacked = tape.concat_rows(&[left, right]).unwrap();
        assert_eq!(tape.value(stacked).shape(), &[4, 2]);
        let loss = tape.sum(back);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let tape = Tape::inference();
        let x = tape.constant(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }
}
