//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! A [`Tape`] records every forward operation in topological order; calling
//! [`Tape::backward`] on a scalar loss walks the record in exact reverse
//! order and accumulates analytic gradients into the `requires_grad` leaves.
//! Backward may run once per tape; a second call is an error.
//!
//! The op set is tailored to what the prior network and losses need: dense
//! matrix products, row-wise norms and activations, token-slot packing, and
//! fused multi-head self-attention / loss reductions. Every backward rule is
//! validated against central finite differences (see `check.rs`).

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    /// `a (n x k) . b (k x m)`
    MatMul { a: usize, b: usize },
    /// `a (n x k) . b (m x k)^T`
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// `a (n x d) + v (1 x d)` broadcast over rows.
    AddRowVec { a: usize, v: usize },
    /// `v (1 x d)` repeated over `n` rows.
    BroadcastRow { v: usize },
    /// Interleave `S` matrices of shape `n x d` into `(n*S) x d`,
    /// row `i*S + s` taken from `slots[s]` row `i`.
    PackSlots { slots: Vec<usize> },
    /// Extract slot `slot` of a packed `(n*seq) x d` matrix.
    SlotSelect { x: usize, slot: usize, seq: usize },
    /// Add `v (seq x d)` periodically to a packed `(n*seq) x d` matrix.
    AddSlotVec { x: usize, v: usize },
    /// Row `i` of the output is `v (1 x d)` where `mask[i]`, else row `i` of `x`.
    RowsWhereVec { x: usize, v: usize, mask: Vec<bool> },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LayerNormRows { a: usize, gain: usize, bias: usize, eps: f64 },
    L2NormRows { a: usize, eps: f64 },
    /// Fused multi-head self-attention over `seq`-token blocks.
    /// `q`, `k`, `v` are `(n*seq) x (heads*head_dim)`; saved softmax
    /// probabilities are laid out `[sample][head][seq][seq]`.
    Attention { q: usize, k: usize, v: usize, heads: usize, seq: usize, probs: Vec<F> },
    SumAll { a: usize },
    /// `(1/N) * sum_i sum_d (pred - target)^2`.
    MeanSumSq { pred: usize, target: usize },
    /// Batch-mean InfoNCE over a square similarity matrix with the positive
    /// on the diagonal; logits are `sims/tau (+ per-row offset)`. The
    /// log-sum-exp and mean run at f64 regardless of `F`. Saved softmax
    /// probabilities are row-major `n x n`.
    NceDiag { sims: usize, tau: f64, n: usize, probs: Vec<f64> },
}

/// Reverse-mode computation record.
pub struct Tape<F: Real> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), needs: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Insert a tensor as a leaf; `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// The value of a `1 x 1` node as f64.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        Ok(self.values[v.0].item()?.as_f64())
    }

    fn needs_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs[i])
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.shape(a);
        let (kb, m) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul: {n}x{ka} . {kb}x{m}")));
        }
        let value = matmul(&self.values[a.0], &self.values[b.0], n, ka, m);
        let needs = self.needs_of(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    /// `a . b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.shape(a);
        let (m, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul_nt: {n}x{ka} . ({m}x{kb})^T")));
        }
        let value = matmul_nt(&self.values[a.0], &self.values[b.0]);
        let needs = self.needs_of(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMulNT { a: a.0, b: b.0 }, needs))
    }

    /// `x . w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_vec(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        let value = zip_tensors(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        let needs = self.needs_of(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let value = zip_tensors(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        let needs = self.needs_of(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul_elem")?;
        let value = zip_tensors(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        let needs = self.needs_of(&[a.0, b.0]);
        Ok(self.push(value, Op::MulElem { a: a.0, b: b.0 }, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let value = self.values[a.0].map(|x| x * cf);
        let needs = self.needs[a.0];
        self.push(value, Op::Scale { a: a.0, c }, needs)
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        if self.shape(v) != (1, d) {
            return Err(Error::Shape(format!(
                "add_row_vec: {n}x{d} + {:?}",
                self.shape(v)
            )));
        }
        let mut value = self.values[a.0].clone();
        let vec = self.values[v.0].clone();
        for r in 0..n {
            for (o, &x) in value.row_mut(r).iter_mut().zip(vec.data().iter()) {
                *o += x;
            }
        }
        let needs = self.needs_of(&[a.0, v.0]);
        Ok(self.push(value, Op::AddRowVec { a: a.0, v: v.0 }, needs))
    }

    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, d) = self.shape(v);
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_row: source is {r}x{d}")));
        }
        let src = self.values[v.0].data().to_vec();
        let mut value = Tensor::zeros(n, d);
        for i in 0..n {
            value.row_mut(i).copy_from_slice(&src);
        }
        let needs = self.needs[v.0];
        Ok(self.push(value, Op::BroadcastRow { v: v.0 }, needs))
    }

    /// Interleave equal-shaped `n x d` matrices into a `(n*S) x d` token matrix.
    pub fn pack_slots(&mut self, slots: &[Var]) -> Result<Var> {
        if slots.is_empty() {
            return Err(Error::Shape("pack_slots: no slots".into()));
        }
        let (n, d) = self.shape(slots[0]);
        for &s in slots {
            if self.shape(s) != (n, d) {
                return Err(Error::Shape("pack_slots: slot shapes differ".into()));
            }
        }
        let seq = slots.len();
        let mut value = Tensor::zeros(n * seq, d);
        for (s, &slot) in slots.iter().enumerate() {
            let src = &self.values[slot.0];
            for i in 0..n {
                value.row_mut(i * seq + s).copy_from_slice(src.row(i));
            }
        }
        let ids: Vec<usize> = slots.iter().map(|v| v.0).collect();
        let needs = self.needs_of(&ids);
        Ok(self.push(value, Op::PackSlots { slots: ids }, needs))
    }

    /// Extract one token slot from a packed `(n*seq) x d` matrix.
    pub fn slot_select(&mut self, x: Var, slot: usize, seq: usize) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if seq == 0 || rows % seq != 0 || slot >= seq {
            return Err(Error::Shape(format!(
                "slot_select: rows {rows}, seq {seq}, slot {slot}"
            )));
        }
        let n = rows / seq;
        let mut value = Tensor::zeros(n, d);
        for i in 0..n {
            value.row_mut(i).copy_from_slice(self.values[x.0].row(i * seq + slot));
        }
        let needs = self.needs[x.0];
        Ok(self.push(value, Op::SlotSelect { x: x.0, slot, seq }, needs))
    }

    /// Add a `seq x d` table periodically to a packed `(n*seq) x d` matrix.
    pub fn add_slot_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, d) = self.shape(x);
        let (seq, dv) = self.shape(v);
        if dv != d || seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "add_slot_vec: {rows}x{d} + {seq}x{dv}"
            )));
        }
        let mut value = self.values[x.0].clone();
        let table = self.values[v.0].clone();
        for r in 0..rows {
            let t = table.row(r % seq);
            for (o, &x) in value.row_mut(r).iter_mut().zip(t.iter()) {
                *o += x;
            }
        }
        let needs = self.needs_of(&[x.0, v.0]);
        Ok(self.push(value, Op::AddSlotVec { x: x.0, v: v.0 }, needs))
    }

    /// Replace masked rows of `x` by the `1 x d` vector `v`.
    pub fn rows_where_vec(&mut self, x: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(v) != (1, d) || mask.len() != n {
            return Err(Error::Shape(format!(
                "rows_where_vec: x {n}x{d}, v {:?}, mask {}",
                self.shape(v),
                mask.len()
            )));
        }
        let mut value = self.values[x.0].clone();
        let vec = self.values[v.0].data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(i).copy_from_slice(&vec);
            }
        }
        let needs = self.needs_of(&[x.0, v.0]);
        Ok(self.push(value, Op::RowsWhereVec { x: x.0, v: v.0, mask: mask.to_vec() }, needs))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(gelu_scalar);
        let needs = self.needs[a.0];
        self.push(value, Op::Gelu { a: a.0 }, needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut value = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let needs = self.needs[a.0];
        self.push(value, Op::SoftmaxRows { a: a.0 }, needs)
    }

    /// Row-wise layer normalization with learned gain/bias (`1 x d` each).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(a);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::Shape(format!(
                "layer_norm: x {n}x{d}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let x = &self.values[a.0];
        let g = &self.values[gain.0];
        let b = &self.values[bias.0];
        let mut value = Tensor::zeros(n, d);
        for r in 0..n {
            let row = x.row(r);
            let (mean, rstd) = row_moments(row, eps);
            for c in 0..d {
                let xn = (row[c].as_f64() - mean) * rstd;
                value.set(r, c, F::from_f64(xn) * g.data()[c] + b.data()[c]);
            }
        }
        let needs = self.needs_of(&[a.0, gain.0, bias.0]);
        Ok(self.push(value, Op::LayerNormRows { a: a.0, gain: gain.0, bias: bias.0, eps }, needs))
    }

    /// Row-wise L2 normalization; the norm is clamped below at `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.values[a.0];
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let norm = super::tensor::l2_norm(row).max(eps);
            let inv = F::from_f64(1.0 / norm);
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let needs = self.needs[a.0];
        self.push(value, Op::L2NormRows { a: a.0, eps }, needs)
    }

    /// Fused multi-head self-attention over fixed-length token blocks.
    ///
    /// `q`, `k`, `v` are `(n*seq) x (heads*head_dim)`; attention is computed
    /// independently within each `seq`-row block, so samples never interact.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, width) = self.shape(q);
        if self.shape(k) != (rows, width) || self.shape(v) != (rows, width) {
            return Err(Error::Shape("attention: q/k/v shapes differ".into()));
        }
        if heads == 0 || width % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "attention: rows {rows}, width {width}, heads {heads}, seq {seq}"
            )));
        }
        let head_dim = width / heads;
        let n = rows / seq;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let mut out = Tensor::zeros(rows, width);
        let mut probs = vec![F::zero(); n * heads * seq * seq];
        for s in 0..n {
            for h in 0..heads {
                let col0 = h * head_dim;
                let base = (s * heads + h) * seq * seq;
                // scores and row softmax
                for i in 0..seq {
                    let qi = &qv.row(s * seq + i)[col0..col0 + head_dim];
                    let block = &mut probs[base + i * seq..base + (i + 1) * seq];
                    for (j, p) in block.iter_mut().enumerate() {
                        let kj = &kv.row(s * seq + j)[col0..col0 + head_dim];
                        *p = F::from_f64(super::tensor::dot(qi, kj) * scale);
                    }
                    softmax_in_place(block);
                }
                // out = P . V
                for i in 0..seq {
                    let block = &probs[base + i * seq..base + (i + 1) * seq];
                    let o = &mut out.row_mut(s * seq + i)[col0..col0 + head_dim];
                    for (j, &p) in block.iter().enumerate() {
                        let vj = &vv.row(s * seq + j)[col0..col0 + head_dim];
                        for (oc, &vc) in o.iter_mut().zip(vj.iter()) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let needs = self.needs_of(&[q.0, k.0, v.0]);
        Ok(self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, seq, probs }, needs))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.values[a.0].data().iter().map(|x| x.as_f64()).sum();
        let needs = self.needs[a.0];
        self.push(Tensor::scalar(F::from_f64(total)), Op::SumAll { a: a.0 }, needs)
    }

    /// Squared L2 distance summed over columns, averaged over rows.
    pub fn mean_sum_sq(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.elementwise_pair(pred, target, "mean_sum_sq")?;
        let (n, _) = self.shape(pred);
        let p = &self.values[pred.0];
        let t = &self.values[target.0];
        let mut total = 0.0f64;
        for (x, y) in p.data().iter().zip(t.data().iter()) {
            let d = x.as_f64() - y.as_f64();
            total += d * d;
        }
        total /= n as f64;
        let needs = self.needs_of(&[pred.0, target.0]);
        Ok(self.push(
            Tensor::scalar(F::from_f64(total)),
            Op::MeanSumSq { pred: pred.0, target: target.0 },
            needs,
        ))
    }

    /// Diagonal-positive InfoNCE over a square similarity matrix.
    ///
    /// `row_offset`, when given, adds a constant to every logit of each row —
    /// a test hook for asserting softmax shift invariance.
    pub fn nce_diag_loss(&mut self, sims: Var, tau: f64, row_offset: Option<&[f64]>) -> Result<Var> {
        let (n, m) = self.shape(sims);
        if n != m {
            return Err(Error::Shape(format!("nce_diag_loss: similarity matrix {n}x{m}")));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("nce_diag_loss: tau must be positive, got {tau}")));
        }
        if let Some(off) = row_offset {
            if off.len() != n {
                return Err(Error::Shape(format!(
                    "nce_diag_loss: {} offsets for {n} rows",
                    off.len()
                )));
            }
        }
        let s = &self.values[sims.0];
        let mut probs = vec![0.0f64; n * n];
        let mut total = 0.0f64;
        for i in 0..n {
            let off = row_offset.map_or(0.0, |o| o[i]);
            let logits: Vec<f64> = s.row(i).iter().map(|&x| x.as_f64() / tau + off).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for (j, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                probs[i * n + j] = e;
                denom += e;
            }
            for p in &mut probs[i * n..(i + 1) * n] {
                *p /= denom;
            }
            let lse = max + denom.ln();
            total += lse - logits[i];
        }
        total /= n as f64;
        let needs = self.needs[sims.0];
        Ok(self.push(
            Tensor::scalar(F::from_f64(total)),
            Op::NceDiag { sims: sims.0, tau, n, probs },
            needs,
        ))
    }

    fn elementwise_pair(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- backward --------------------------------------------------------

    /// Propagate gradients from a scalar loss back to every
    /// `requires_grad` leaf. Errors on a non-scalar loss and on reuse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward: loss must be 1x1, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            if !self.needs[i] {
                self.grads[i] = None;
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
        }
        Ok(())
    }

    fn acc(grads: &mut [Option<Tensor<F>>], needs: &[bool], idx: usize, delta: Tensor<F>) {
        if !needs[idx] {
            return;
        }
        match &mut grads[idx] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, gout: &Tensor<F>) {
        let Tape { values, ops, needs, grads, .. } = self;
        let acc = Self::acc;
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // c = a.b: da = g.b^T ; db = a^T.g
                if needs[*a] {
                    acc(grads, needs, *a, matmul_nt(gout, &values[*b]));
                }
                if needs[*b] {
                    acc(grads, needs, *b, matmul_tn(&values[*a], gout));
                }
            }
            Op::MatMulNT { a, b } => {
                // c = a.b^T: da = g.b ; db = g^T.a
                if needs[*a] {
                    let (n, m) = gout.shape();
                    acc(grads, needs, *a, matmul(gout, &values[*b], n, m, values[*b].cols()));
                }
                if needs[*b] {
                    acc(grads, needs, *b, matmul_tn(gout, &values[*a]));
                }
            }
            Op::Add { a, b } => {
                acc(grads, needs, *a, gout.clone());
                acc(grads, needs, *b, gout.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, needs, *a, gout.clone());
                acc(grads, needs, *b, gout.map(|x| -x));
            }
            Op::MulElem { a, b } => {
                if needs[*a] {
                    acc(grads, needs, *a, zip_tensors(gout, &values[*b], |g, y| g * y));
                }
                if needs[*b] {
                    acc(grads, needs, *b, zip_tensors(gout, &values[*a], |g, x| g * x));
                }
            }
            Op::Scale { a, c } => {
                let cf = F::from_f64(*c);
                acc(grads, needs, *a, gout.map(|g| g * cf));
            }
            Op::AddRowVec { a, v } => {
                acc(grads, needs, *a, gout.clone());
                if needs[*v] {
                    acc(grads, needs, *v, column_sums(gout));
                }
            }
            Op::BroadcastRow { v } => {
                acc(grads, needs, *v, column_sums(gout));
            }
            Op::PackSlots { slots } => {
                let seq = slots.len();
                let n = gout.rows() / seq;
                let d = gout.cols();
                for (s, &slot) in slots.iter().enumerate() {
                    if !needs[slot] {
                        continue;
                    }
                    let mut dslot = Tensor::zeros(n, d);
                    for r in 0..n {
                        dslot.row_mut(r).copy_from_slice(gout.row(r * seq + s));
                    }
                    acc(grads, needs, slot, dslot);
                }
            }
            Op::SlotSelect { x, slot, seq } => {
                let (n, d) = gout.shape();
                let mut dx = Tensor::zeros(n * seq, d);
                for r in 0..n {
                    dx.row_mut(r * seq + slot).copy_from_slice(gout.row(r));
                }
                acc(grads, needs, *x, dx);
            }
            Op::AddSlotVec { x, v } => {
                acc(grads, needs, *x, gout.clone());
                if needs[*v] {
                    let (seq, d) = values[*v].shape();
                    let mut dv = Tensor::zeros(seq, d);
                    for r in 0..gout.rows() {
                        let dst = dv.row_mut(r % seq);
                        for (o, &g) in dst.iter_mut().zip(gout.row(r).iter()) {
                            *o += g;
                        }
                    }
                    acc(grads, needs, *v, dv);
                }
            }
            Op::RowsWhereVec { x, v, mask } => {
                if needs[*x] {
                    let mut dx = gout.clone();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            dx.row_mut(i).fill(F::zero());
                        }
                    }
                    acc(grads, needs, *x, dx);
                }
                if needs[*v] {
                    let d = gout.cols();
                    let mut dv = Tensor::zeros(1, d);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, &g) in dv.data_mut().iter_mut().zip(gout.row(i).iter()) {
                                *o += g;
                            }
                        }
                    }
                    acc(grads, needs, *v, dv);
                }
            }
            Op::Gelu { a } => {
                acc(grads, needs, *a, zip_tensors(gout, &values[*a], |g, x| g * gelu_deriv(x)));
            }
            Op::SoftmaxRows { a } => {
                // dx = y * (g - sum_j(g_j * y_j)) per row
                let y = &values[i];
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = gout.row(r);
                    let inner: f64 =
                        yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv.as_f64() * gv.as_f64()).sum();
                    let inner = F::from_f64(inner);
                    for (o, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter())) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(grads, needs, *a, dx);
            }
            Op::LayerNormRows { a, gain, bias, eps } => {
                let x = &values[*a];
                let g = &values[*gain];
                let (n, d) = x.shape();
                let mut dx = Tensor::zeros(n, d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                for r in 0..n {
                    let row = x.row(r);
                    let (mean, rstd) = row_moments(row, *eps);
                    let gr = gout.row(r);
                    // per-row reductions at f64
                    let mut sum_dxn = 0.0f64;
                    let mut sum_dxn_xn = 0.0f64;
                    let mut xn = vec![0.0f64; d];
                    let mut dxn = vec![0.0f64; d];
                    for c in 0..d {
                        xn[c] = (row[c].as_f64() - mean) * rstd;
                        dxn[c] = gr[c].as_f64() * g.data()[c].as_f64();
                        sum_dxn += dxn[c];
                        sum_dxn_xn += dxn[c] * xn[c];
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let v = rstd * (dxn[c] - sum_dxn * inv_d - xn[c] * sum_dxn_xn * inv_d);
                        dx.set(r, c, F::from_f64(v));
                        let dg = dgain.data_mut();
                        dg[c] += F::from_f64(gr[c].as_f64() * xn[c]);
                        dbias.data_mut()[c] += gr[c];
                    }
                }
                acc(grads, needs, *a, dx);
                acc(grads, needs, *gain, dgain);
                acc(grads, needs, *bias, dbias);
            }
            Op::L2NormRows { a, eps } => {
                // y = x / max(|x|, eps); dx = (g - (g.y) y) / max(|x|, eps)
                let x = &values[*a];
                let y = &values[i];
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = super::tensor::l2_norm(x.row(r)).max(*eps);
                    let gy = super::tensor::dot(gout.row(r), y.row(r));
                    for c in 0..x.cols() {
                        let v = (gout.get(r, c).as_f64() - gy * y.get(r, c).as_f64()) / norm;
                        dx.set(r, c, F::from_f64(v));
                    }
                }
                acc(grads, needs, *a, dx);
            }
            Op::Attention { q, k, v, heads, seq, probs } => {
                let (rows, width) = values[*q].shape();
                let head_dim = width / heads;
                let n = rows / seq;
                let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
                let mut dq = Tensor::zeros(rows, width);
                let mut dk = Tensor::zeros(rows, width);
                let mut dv = Tensor::zeros(rows, width);
                let seq = *seq;
                let mut dp = vec![F::zero(); seq];
                let mut ds = vec![F::zero(); seq];
                for s in 0..n {
                    for h in 0..*heads {
                        let col0 = h * head_dim;
                        let base = (s * heads + h) * seq * seq;
                        for i_tok in 0..seq {
                            let go = &gout.row(s * seq + i_tok)[col0..col0 + head_dim];
                            let p_row = &probs[base + i_tok * seq..base + (i_tok + 1) * seq];
                            // dV += P^T . dO ; dP = dO . V^T
                            let mut inner = F::zero();
                            for j in 0..seq {
                                let vj = &values[*v].row(s * seq + j)[col0..col0 + head_dim];
                                let mut acc_dp = F::zero();
                                for (&gc, &vc) in go.iter().zip(vj.iter()) {
                                    acc_dp += gc * vc;
                                }
                                dp[j] = acc_dp;
                                inner += acc_dp * p_row[j];
                                let dvj = &mut dv.row_mut(s * seq + j)[col0..col0 + head_dim];
                                for (o, &gc) in dvj.iter_mut().zip(go.iter()) {
                                    *o += p_row[j] * gc;
                                }
                            }
                            // softmax backward then score backward
                            for j in 0..seq {
                                ds[j] = p_row[j] * (dp[j] - inner) * scale;
                            }
                            for j in 0..seq {
                                let kj = &values[*k].row(s * seq + j)[col0..col0 + head_dim];
                                let qi = &values[*q].row(s * seq + i_tok)[col0..col0 + head_dim];
                                let dqi = &mut dq.row_mut(s * seq + i_tok)[col0..col0 + head_dim];
                                for (o, &kc) in dqi.iter_mut().zip(kj.iter()) {
                                    *o += ds[j] * kc;
                                }
                                let dkj = &mut dk.row_mut(s * seq + j)[col0..col0 + head_dim];
                                for (o, &qc) in dkj.iter_mut().zip(qi.iter()) {
                                    *o += ds[j] * qc;
                                }
                            }
                        }
                    }
                }
                acc(grads, needs, *q, dq);
                acc(grads, needs, *k, dk);
                acc(grads, needs, *v, dv);
            }
            Op::SumAll { a } => {
                let g = gout.item().expect("sum_all grad shape");
                let (n, d) = values[*a].shape();
                let mut dx = Tensor::zeros(n, d);
                dx.data_mut().fill(g);
                acc(grads, needs, *a, dx);
            }
            Op::MeanSumSq { pred, target } => {
                let g = gout.item().expect("mean_sum_sq grad shape").as_f64();
                let n = values[*pred].rows() as f64;
                let coeff = 2.0 * g / n;
                if needs[*pred] {
                    let d = zip_tensors(&values[*pred], &values[*target], |p, t| {
                        F::from_f64(coeff * (p.as_f64() - t.as_f64()))
                    });
                    acc(grads, needs, *pred, d);
                }
                if needs[*target] {
                    let d = zip_tensors(&values[*pred], &values[*target], |p, t| {
                        F::from_f64(-coeff * (p.as_f64() - t.as_f64()))
                    });
                    acc(grads, needs, *target, d);
                }
            }
            Op::NceDiag { sims, tau, n, probs } => {
                let g = gout.item().expect("nce grad shape").as_f64();
                let coeff = g / (*n as f64 * tau);
                let mut dsims = Tensor::zeros(*n, *n);
                for i_row in 0..*n {
                    for j in 0..*n {
                        let indicator = if i_row == j { 1.0 } else { 0.0 };
                        let v = coeff * (probs[i_row * n + j] - indicator);
                        dsims.set(i_row, j, F::from_f64(v));
                    }
                }
                acc(grads, needs, *sims, dsims);
            }
        }
    }
}

// ---- shared scalar kernels ------------------------------------------------

#[inline]
fn gelu_scalar<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let u = SQRT_2_OVER_PI * (xf + GELU_CUBIC * xf * xf * xf);
    F::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

#[inline]
fn gelu_deriv<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let u = SQRT_2_OVER_PI * (xf + GELU_CUBIC * xf * xf * xf);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xf * xf);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v = *v / denom;
    }
}

/// Per-row mean and reciprocal standard deviation at f64.
fn row_moments<F: Real>(row: &[F], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / d;
    let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn zip_tensors<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip shape")
}

fn column_sums<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r).iter()) {
            *o += v;
        }
    }
    out
}

/// `a (n x k) . b (k x m)`, cache-friendly i-k-j loop order.
fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>, n: usize, k: usize, m: usize) -> Tensor<F> {
    debug_assert_eq!(a.shape(), (n, k));
    debug_assert_eq!(b.shape(), (k, m));
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `a (n x k) . b (m x k)^T`.
fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (n, k) = a.shape();
    let m = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut s = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                s += x * y;
            }
            *o = s;
        }
    }
    out
}

/// `a (k x n)^T . b (k x m)`.
fn matmul_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, n) = a.shape();
    let m = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut out = Tensor::zeros(n, m);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_pi * bv;
            }
        }
    }
    out
}
