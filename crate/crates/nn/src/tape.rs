//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 x 1` node walks the record in reverse and
//! accumulates parameter gradients into a [`Gradients`] buffer.

use crate::tensor::{gemm, gemm_strided, MatRef};
use crate::{Gradients, NnError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, usize, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        // [head][query][key]
        alpha: Vec<f64>,
    },
    GroupedAttention {
        q: Var,
        ks: Vec<Var>,
        vs: Vec<Var>,
        heads: usize,
        mask: Option<Vec<bool>>,
        // [query][head][item]
        alpha: Vec<f64>,
    },
    PpoClip {
        logp: Var,
        ratio: f64,
        advantage: f64,
        clip_eps: f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Records one forward pass against a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`; `a` is `m x k`, `b` is `n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_t inner dimension");
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, MatRef::normal(ta), MatRef::transposed(tb), out.data_mut(), 0.0);
        self.push(out, Op::MatMulT(a, b))
    }

    /// `x * w + b` with `b` a `1 x out` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_vec(ta.rows(), ta.cols(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.rows(), 1, "add_row expects a single row");
        assert_eq!(ta.cols(), tr.cols(), "add_row column mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta` (both `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut normed = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            rstd.push(inv);
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut out = normed.clone();
        for r in 0..rows {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(rows.len(), ta.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(ta.row(r));
        }
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.value(a).get(r, c);
        self.push(Tensor::scalar(v), Op::Pick(a, r, c))
    }

    /// Scaled dot-product attention with keys shared across all queries.
    ///
    /// `q` is `n_q x d`, `k` and `v` are `n_k x d`; `mask` (row-major
    /// `n_q x n_k`, `true` = attend) removes entries before the softmax.
    /// Heads split the feature dimension into equal column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (tq.rows(), tq.cols());
        let nk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != nk {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadSplit { dim: d, heads });
        }
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(NnError::ShapeMismatch {
                    op: "attention mask",
                    left: vec![nq, nk],
                    right: vec![m.len()],
                });
            }
        }
        if nk == 0 {
            return Err(NnError::AllMaskedRow { row: 0 });
        }
        for i in 0..nq {
            if let Some(m) = mask {
                if !m[i * nk..(i + 1) * nk].iter().any(|&b| b) {
                    return Err(NnError::AllMaskedRow { row: i });
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut alpha = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(nq, d);
        for h in 0..heads {
            let a = &mut alpha[h * nq * nk..(h + 1) * nq * nk];
            // scores = Q_h K_h^T
            gemm(
                nq,
                dh,
                nk,
                MatRef::strided(tq.data(), h * dh, d, 1),
                MatRef::strided(tk.data(), h * dh, 1, d),
                a,
                0.0,
            );
            for i in 0..nq {
                let row = &mut a[i * nk..(i + 1) * nk];
                row.iter_mut().for_each(|s| *s *= scale);
                match mask {
                    Some(m) => masked_softmax_in_place(row, &m[i * nk..(i + 1) * nk]),
                    None => softmax_in_place(row),
                }
            }
            // out_h = A_h V_h
            gemm_strided(
                nq,
                nk,
                dh,
                MatRef::strided(a, 0, nk, 1),
                MatRef::strided(tv.data(), h * dh, d, 1),
                &mut out.data_mut()[h * dh..],
                d,
                0.0,
            );
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                alpha,
            },
        ))
    }

    /// Attention where every query row `i` attends over its own item set:
    /// item `j` contributes key row `ks[j][i]` and value row `vs[j][i]`.
    ///
    /// `mask` (length = item count, `true` = attend) applies to all rows.
    /// Masked items are skipped entirely, so their values never reach the output.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        ks: &[Var],
        vs: &[Var],
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let m = ks.len();
        let tq = self.value(q);
        let (n, d) = (tq.rows(), tq.cols());
        if vs.len() != m {
            return Err(NnError::ShapeMismatch {
                op: "grouped_attention",
                left: vec![m],
                right: vec![vs.len()],
            });
        }
        for var in ks.iter().chain(vs) {
            let t = self.value(*var);
            if t.rows() != n || t.cols() != d {
                return Err(NnError::ShapeMismatch {
                    op: "grouped_attention",
                    left: tq.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadSplit { dim: d, heads });
        }
        let keep: Vec<bool> = match mask {
            Some(mk) if mk.len() != m => {
                return Err(NnError::ShapeMismatch {
                    op: "grouped_attention mask",
                    left: vec![m],
                    right: vec![mk.len()],
                })
            }
            Some(mk) => mk.to_vec(),
            None => vec![true; m],
        };
        if !keep.iter().any(|&b| b) {
            return Err(NnError::AllMaskedRow { row: 0 });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let kt: Vec<&Tensor> = ks.iter().map(|k| self.value(*k)).collect();
        let vt: Vec<&Tensor> = vs.iter().map(|v| self.value(*v)).collect();
        let mut alpha = vec![0.0; n * heads * m];
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let qi = tq.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &mut alpha[(i * heads + h) * m..(i * heads + h + 1) * m];
                for j in 0..m {
                    if keep[j] {
                        a[j] = dot(&qi[cols.clone()], &kt[j].row(i)[cols.clone()]) * scale;
                    }
                }
                masked_softmax_in_place(a, &keep);
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..m {
                    if keep[j] {
                        let w = a[j];
                        for (oc, vc) in o.iter_mut().zip(&vt[j].row(i)[cols.clone()]) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::GroupedAttention {
                q,
                ks: ks.to_vec(),
                vs: vs.to_vec(),
                heads,
                mask: mask.map(<[bool]>::to_vec),
                alpha,
            },
        ))
    }

    /// Attention weights recorded by an attention node, flattened.
    ///
    /// Layout is `[head][query][key]` for [`attention`](Self::attention) and
    /// `[query][head][item]` for [`grouped_attention`](Self::grouped_attention).
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { alpha, .. } | Op::GroupedAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Negated PPO clipped surrogate for one sample, so that minimizing maximizes it.
    ///
    /// `logp` is the `1 x 1` log-probability of the taken action under the
    /// current parameters; `logp_old` comes from the behavior policy.
    pub fn ppo_clip(&mut self, logp: Var, logp_old: f64, advantage: f64, clip_eps: f64) -> Var {
        let ratio = (self.value(logp).item() - logp_old).exp();
        let out = -clipped_surrogate(ratio, advantage, clip_eps);
        self.push(
            Tensor::scalar(out),
            Op::PpoClip {
                logp,
                ratio,
                advantage,
                clip_eps,
            },
        )
    }

    /// Reverse pass from the scalar `loss`, adding into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj, grads);
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>], grads: &mut Gradients) {
        let out = || self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => grads.get_mut(*id).add_assign(g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = Tensor::zeros(m, k);
                gemm(m, n, k, MatRef::normal(g), MatRef::transposed(tb), ga.data_mut(), 0.0);
                let mut gb = Tensor::zeros(k, n);
                gemm(k, m, n, MatRef::transposed(ta), MatRef::normal(g), gb.data_mut(), 0.0);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let mut ga = Tensor::zeros(m, k);
                gemm(m, n, k, MatRef::normal(g), MatRef::normal(tb), ga.data_mut(), 0.0);
                let mut gb = Tensor::zeros(n, k);
                gemm(n, m, k, MatRef::transposed(g), MatRef::normal(ta), gb.data_mut(), 0.0);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                accumulate(adj, *b, neg);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *row, gr);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, hadamard(g, tb));
                accumulate(adj, *b, hadamard(g, ta));
            }
            Op::Scale(a, f) => {
                let mut ga = g.clone();
                ga.scale_assign(*f);
                accumulate(adj, *a, ga);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let data = g.data().iter().zip(ta.data()).map(|(gv, x)| 2.0 * x * gv).collect();
                accumulate(adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let (rows, cols) = (g.rows(), g.cols());
                let mut gx = Tensor::zeros(rows, cols);
                let mut ggamma = Tensor::zeros(1, cols);
                let mut gbeta = Tensor::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (gr, nr) = (g.row(r), normed.row(r));
                    for c in 0..cols {
                        ggamma.data_mut()[c] += gr[c] * nr[c];
                        gbeta.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dn = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (dxhat[c] - mean_d - nr[c] * mean_dn);
                    }
                }
                accumulate(adj, *x, gx);
                accumulate(adj, *gamma, ggamma);
                accumulate(adj, *beta, gbeta);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut gp = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(adj, *p, gp);
                }
            }
            Op::GatherRows(a, rows) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.len() as f64;
                accumulate(adj, *a, Tensor::filled(ta.rows(), ta.cols(), v));
            }
            Op::SoftmaxRows(a) => {
                let y = out();
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp = dot(yr, gr);
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dotp);
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out();
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - yr[c].exp() * gsum;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Pick(a, r, c) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                ga.set(*r, *c, g.item());
                accumulate(adj, *a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                alpha,
            } => self.attention_backward(g, *q, *k, *v, *heads, alpha, adj),
            Op::GroupedAttention {
                q,
                ks,
                vs,
                heads,
                mask,
                alpha,
            } => self.grouped_backward(g, *q, ks, vs, *heads, mask.as_deref(), alpha, adj),
            Op::PpoClip {
                logp,
                ratio,
                advantage,
                clip_eps,
            } => {
                let unclipped = ratio * advantage;
                let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
                let d = if unclipped <= clipped { -unclipped } else { 0.0 };
                accumulate(adj, *logp, Tensor::scalar(d * g.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        alpha: &[f64],
        adj: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d, nk) = (tq.rows(), tq.cols(), tk.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(nq, d);
        let mut gk = Tensor::zeros(nk, d);
        let mut gv = Tensor::zeros(nk, d);
        let mut da = vec![0.0; nq * nk];
        for h in 0..heads {
            let a = &alpha[h * nq * nk..(h + 1) * nq * nk];
            let go_h = MatRef::strided(g.data(), h * dh, d, 1);
            // dV_h = A^T dO_h
            gemm_strided(
                nk,
                nq,
                dh,
                MatRef::strided(a, 0, 1, nk),
                go_h,
                &mut gv.data_mut()[h * dh..],
                d,
                0.0,
            );
            // dA = dO_h V_h^T
            gemm(
                nq,
                dh,
                nk,
                go_h,
                MatRef::strided(tv.data(), h * dh, 1, d),
                &mut da,
                0.0,
            );
            for i in 0..nq {
                let ar = &a[i * nk..(i + 1) * nk];
                let dr = &mut da[i * nk..(i + 1) * nk];
                let s = dot(ar, dr);
                for (dv, av) in dr.iter_mut().zip(ar) {
                    *dv = av * (*dv - s) * scale;
                }
            }
            // dQ_h = dS K_h ; dK_h = dS^T Q_h
            gemm_strided(
                nq,
                nk,
                dh,
                MatRef::strided(&da, 0, nk, 1),
                MatRef::strided(tk.data(), h * dh, d, 1),
                &mut gq.data_mut()[h * dh..],
                d,
                0.0,
            );
            gemm_strided(
                nk,
                nq,
                dh,
                MatRef::strided(&da, 0, 1, nk),
                MatRef::strided(tq.data(), h * dh, d, 1),
                &mut gk.data_mut()[h * dh..],
                d,
                0.0,
            );
        }
        accumulate(adj, q, gq);
        accumulate(adj, k, gk);
        accumulate(adj, v, gv);
    }

    #[allow(clippy::too_many_arguments)]
    fn grouped_backward(
        &self,
        g: &Tensor,
        q: Var,
        ks: &[Var],
        vs: &[Var],
        heads: usize,
        mask: Option<&[bool]>,
        alpha: &[f64],
        adj: &mut [Option<Tensor>],
    ) {
        let tq = self.value(q);
        let (n, d) = (tq.rows(), tq.cols());
        let m = ks.len();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keep = |j: usize| mask.map_or(true, |mk| mk[j]);
        let kt: Vec<&Tensor> = ks.iter().map(|k| self.value(*k)).collect();
        let vt: Vec<&Tensor> = vs.iter().map(|v| self.value(*v)).collect();
        let mut gq = Tensor::zeros(n, d);
        let mut gk: Vec<Tensor> = (0..m).map(|_| Tensor::zeros(n, d)).collect();
        let mut gv: Vec<Tensor> = (0..m).map(|_| Tensor::zeros(n, d)).collect();
        let mut da = vec![0.0; m];
        for i in 0..n {
            let qi = tq.row(i);
            let gi = g.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &alpha[(i * heads + h) * m..(i * heads + h + 1) * m];
                let go = &gi[cols.clone()];
                for j in 0..m {
                    if !keep(j) {
                        da[j] = 0.0;
                        continue;
                    }
                    da[j] = dot(go, &vt[j].row(i)[cols.clone()]);
                    for (o, gv_) in gv[j].row_mut(i)[cols.clone()].iter_mut().zip(go) {
                        *o += a[j] * gv_;
                    }
                }
                let s = dot(a, &da);
                for j in 0..m {
                    if !keep(j) {
                        continue;
                    }
                    let ds = a[j] * (da[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = &kt[j].row(i)[cols.clone()];
                    for (o, kv) in gq.row_mut(i)[cols.clone()].iter_mut().zip(kr) {
                        *o += ds * kv;
                    }
                    for (o, qv) in gk[j].row_mut(i)[cols.clone()].iter_mut().zip(&qi[cols.clone()]) {
                        *o += ds * qv;
                    }
                }
            }
        }
        accumulate(adj, q, gq);
        for (j, (gkj, gvj)) in gk.into_iter().zip(gv).enumerate() {
            if keep(j) {
                accumulate(adj, ks[j], gkj);
                accumulate(adj, vs[j], gvj);
            }
        }
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    unclipped.min(clipped)
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Softmax over the `keep` entries; the others are set to exactly zero.
pub fn masked_softmax_in_place(row: &mut [f64], keep: &[bool]) {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, k) in row.iter_mut().zip(keep) {
        if *k {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for (v, k) in row.iter_mut().zip(keep) {
        if *k {
            *v /= sum;
        }
    }
}
