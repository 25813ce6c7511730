use rand::Rng;

use crate::{NnError, ParamId, ParamStore, Tape, Tensor, Var};

/// Fully-connected layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, in_dim, out_dim, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, gain, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Affine parameters of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

/// Multi-head attention sub-layer: projections, scaled dot-product
/// attention, output projection, then residual connection and post-norm.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm: LayerNorm,
    pub dim: usize,
    pub heads: usize,
}

/// Output of an attention sub-layer together with the node holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub scores: Var,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Self::with_gain(store, name, dim, heads, 1.0, rng)
    }

    /// `qk_gain` scales the initial query/key projections.
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        qk_gain: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::HeadSplit { dim, heads });
        }
        Ok(Self {
            w_q: store.add_uniform(format!("{name}.w_q"), dim, dim, qk_gain, rng),
            w_k: store.add_uniform(format!("{name}.w_k"), dim, dim, qk_gain, rng),
            w_v: store.add_uniform(format!("{name}.w_v"), dim, dim, 1.0, rng),
            w_o: store.add_uniform(format!("{name}.w_o"), dim, dim, 1.0, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            dim,
            heads,
        })
    }

    fn project(&self, tape: &mut Tape<'_>, x: Var, w: ParamId) -> Var {
        let w = tape.param(w);
        tape.matmul(x, w)
    }

    fn finish(&self, tape: &mut Tape<'_>, h_q: Var, attended: Var) -> AttentionOutput {
        let projected = self.project(tape, attended, self.w_o);
        let residual = tape.add(h_q, projected);
        AttentionOutput {
            output: self.norm.forward(tape, residual),
            scores: attended,
        }
    }

    /// Every query attends over the same key/value rows `h_kv`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h_q: Var,
        h_kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput, NnError> {
        let q = self.project(tape, h_q, self.w_q);
        let k = self.project(tape, h_kv, self.w_k);
        let v = self.project(tape, h_kv, self.w_v);
        let attended = tape.attention(q, k, v, self.heads, mask)?;
        Ok(self.finish(tape, h_q, attended))
    }

    /// Row `i` of `h_q` attends over row `i` of every tensor in `items`.
    pub fn forward_grouped(
        &self,
        tape: &mut Tape<'_>,
        h_q: Var,
        items: &[Var],
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput, NnError> {
        let q = self.project(tape, h_q, self.w_q);
        let mut ks = Vec::with_capacity(items.len());
        let mut vs = Vec::with_capacity(items.len());
        for (j, item) in items.iter().enumerate() {
            if mask.map_or(true, |m| m.get(j).copied().unwrap_or(true)) {
                ks.push(self.project(tape, *item, self.w_k));
                vs.push(self.project(tape, *item, self.w_v));
            } else {
                // Masked items are never read; skip the projection work.
                ks.push(*item);
                vs.push(*item);
            }
        }
        let attended = tape.grouped_attention(q, &ks, &vs, self.heads, mask)?;
        Ok(self.finish(tape, h_q, attended))
    }
}

/// Position-wise feed-forward sub-layer with residual and post-norm.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        let h = self.out.forward(tape, h);
        let residual = tape.add(x, h);
        self.norm.forward(tape, residual)
    }
}

/// One Transformer block: attention sub-layer then feed-forward sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub attention: AttentionLayer,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            attention: AttentionLayer::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h_q: Var,
        h_kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput, NnError> {
        let att = self.attention.forward(tape, h_q, h_kv, mask)?;
        Ok(AttentionOutput {
            output: self.ffn.forward(tape, att.output),
            scores: att.scores,
        })
    }

    pub fn forward_grouped(
        &self,
        tape: &mut Tape<'_>,
        h_q: Var,
        items: &[Var],
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput, NnError> {
        let att = self.attention.forward_grouped(tape, h_q, items, mask)?;
        Ok(AttentionOutput {
            output: self.ffn.forward(tape, att.output),
            scores: att.scores,
        })
    }
}
