//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every operation evaluates eagerly and records enough state to run its
//! vector-Jacobian product later. The op set is exactly what the
//! encoder-decoder needs; attention and layer norm are fused ops with
//! hand-written backward passes.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One attention block: queries `q_start..q_start+q_len` attend over keys
/// `k_start..k_start+k_len` of the stacked key matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// How stacked sequences attend: block-diagonal over `segments`, with
/// an optional causal mask and per-key padding mask (`true` = visible).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
    pub n_heads: usize,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaskMul(Var, Mat),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        /// Softmax weights, one matrix per (segment, head), segment-major.
        probs: Vec<Mat>,
    },
    LogSoftmax(Var),
}

pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the seeded output with respect to each tape parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Mat> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    /// Adds `g` into the slot of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: Mat) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn into_entries(self) -> impl Iterator<Item = (ParamId, Mat)> {
        self.slots
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g *= c;
        }
    }
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    /// Smallest `|x|` over every ReLU input recorded so far, or infinity.
    pub fn relu_margin(&self) -> f64 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Relu(a) => Some(self.values[a.0].iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId, m: Mat) -> Var {
        self.push(m, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0].t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim(), "add shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.values[row.0].nrows(), 1, "bias must be a single row");
        let v = &self.values[a.0] + &self.values[row.0];
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Elementwise product with a constant (a pre-scaled dropout mask).
    pub fn mask_mul(&mut self, a: Var, mask: Mat) -> Var {
        let v = &self.values[a.0] * &mask;
        let ng = self.ng(a);
        self.push(v, Op::MaskMul(a, mask), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = &self.values[table.0];
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(v, Op::Gather(table, ids), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.values[a.0].view(), self.values[b.0].view()])
            .expect("concat_cols row mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    /// Row-wise layer normalization with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.values[x.0];
        let n = xv.ncols() as f64;
        let mut xhat = Mat::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(i))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let out = &xhat * &self.values[gamma.0] + &self.values[beta.0];
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    /// `q`, `k`, `v` already carry the heads side by side in their columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = qv.ncols();
        let h = layout.n_heads;
        assert!(d % h == 0, "width {d} not divisible by {h} heads");
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.segments.len() * h);
        for seg in &layout.segments {
            let mask = segment_mask(&layout, seg);
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                let qh = qv.slice(s![seg.q_start..seg.q_start + seg.q_len, cols.clone()]);
                let kh = kv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let vh = vv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                masked_softmax_rows(&mut p, &mask);
                out.slice_mut(s![seg.q_start..seg.q_start + seg.q_len, cols])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, layout, probs }, ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.values[a.0].clone();
        for mut row in v.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `root`) back to every parameter on the tape.
    pub fn backward(&self, root: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.dim(), self.values[root.0].dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g.dot(&self.values[b.0].t()));
                    }
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], self.values[a.0].t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g.dot(&self.values[b.0]));
                    }
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], g.t().dot(&self.values[a.0]));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => add_into(&mut grads[a.0], g * *c),
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&self.values[i]).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    add_into(&mut grads[a.0], g);
                }
                Op::MaskMul(a, mask) => add_into(&mut grads[a.0], g * mask),
                Op::Gather(table, ids) => {
                    let mut dt = Mat::zeros(self.values[table.0].dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    add_into(&mut grads[table.0], dt);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.values[a.0].ncols();
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g.slice(s![.., ..wa]).to_owned());
                    }
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], g.slice(s![.., wa..]).to_owned());
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        add_into(&mut grads[gamma.0], (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*beta) {
                        add_into(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * &self.values[gamma.0];
                        let n = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.dim());
                        for (r, &is) in inv_std.iter().enumerate() {
                            let dr = dxhat.row(r);
                            let hr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dh = dr.dot(&hr);
                            Zip::from(dx.row_mut(r))
                                .and(&dr)
                                .and(&hr)
                                .for_each(|o, &d, &h| *o = is * (d - sum_d / n - h * sum_dh / n));
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &g);
                    if self.ng(*q) {
                        add_into(&mut grads[q.0], dq);
                    }
                    if self.ng(*k) {
                        add_into(&mut grads[k.0], dk);
                    }
                    if self.ng(*v) {
                        add_into(&mut grads[v.0], dv);
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &self.values[i];
                    let mut dx = g;
                    for (mut drow, yrow) in dx.outer_iter_mut().zip(y.outer_iter()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y.exp() * total);
                    }
                    add_into(&mut grads[a.0], dx);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[Mat],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = qv.ncols();
        let h = layout.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        let mut p_iter = probs.iter();
        for seg in &layout.segments {
            let qr = seg.q_start..seg.q_start + seg.q_len;
            let kr = seg.k_start..seg.k_start + seg.k_len;
            for head in 0..h {
                let p = p_iter.next().expect("one probability block per head");
                let cols = head * dh..(head + 1) * dh;
                let go = g.slice(s![qr.clone(), cols.clone()]);
                let vh = vv.slice(s![kr.clone(), cols.clone()]);
                let qh = qv.slice(s![qr.clone(), cols.clone()]);
                let kh = kv.slice(s![kr.clone(), cols.clone()]);
                let dp = go.dot(&vh.t());
                let mut ds = p * &dp;
                for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let total = ds_row.sum();
                    Zip::from(&mut ds_row).and(&p_row).for_each(|x, &p| *x -= p * total);
                }
                ds *= scale;
                let mut dvh = dv.slice_mut(s![kr.clone(), cols.clone()]);
                dvh += &p.t().dot(&go);
                let mut dqh = dq.slice_mut(s![qr.clone(), cols.clone()]);
                dqh += &ds.dot(&kh);
                let mut dkh = dk.slice_mut(s![kr.clone(), cols]);
                dkh += &ds.t().dot(&qh);
            }
        }
        (dq, dk, dv)
    }
}

/// `true` where query `i` may look at key `j` within one segment.
fn segment_mask(layout: &AttnLayout, seg: &AttnSegment) -> Array2<bool> {
    Array2::from_shape_fn((seg.q_len, seg.k_len), |(i, j)| {
        let visible = layout.key_mask.as_ref().is_none_or(|m| m[seg.k_start + j]);
        visible && !(layout.causal && j > i)
    })
}

/// In-place softmax over each row restricted to `mask`; rows with no
/// visible key become all zeros.
fn masked_softmax_rows(scores: &mut Mat, mask: &Array2<bool>) {
    for (mut row, mrow) in scores.outer_iter_mut().zip(mask.outer_iter()) {
        let m = row
            .iter()
            .zip(mrow.iter())
            .filter(|(_, &ok)| ok)
            .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
        if m == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        Zip::from(&mut row).and(&mrow).for_each(|x, &ok| {
            *x = if ok { (*x - m).exp() } else { 0.0 };
            total += *x;
        });
        row.mapv_inplace(|x| x / total);
    }
}

/// Central finite-difference derivative of `f` at every entry of `x`.
/// Test-support utility; independent of [`Tape::backward`].
pub fn numerical_gradient<F>(x: ArrayView2<'_, f64>, step: f64, mut f: F) -> Mat
where
    F: FnMut(&Mat) -> f64,
{
    let mut probe = x.to_owned();
    let mut out = Mat::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        out[idx] = (up - down) / (2.0 * step);
    }
    out
}
