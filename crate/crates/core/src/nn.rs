//! Layers shared by the encoder, decoders and baselines.

use crate::autograd::{Graph, RopeCache, Var};
use crate::error::{config, Result};
use crate::flops::FlopKind;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use std::rc::Rc;

/// `y = x·W + b` over the last axis, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
            depth,
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), depth)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_broadcast(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, depth: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0), depth)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), depth)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, Some(p[self.gamma]), Some(p[self.beta]))
    }
}

/// Linear → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, depth)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, depth)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

pub struct AttentionOutput {
    /// `[n, Lq, d]`
    pub out: Var,
    /// Post-softmax weights `[n, H, Lq, Lk]`.
    pub weights: Var,
}

/// Scaled dot-product attention with learned input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return config(format!("attention width {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, depth)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, depth)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, depth)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, depth)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[n, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[n * self.heads, l, dh])
    }

    /// `query[n, Lq, d]` attends over `kv[n, Lk, d]`. With `rope`, queries and
    /// keys are rotated by their sequence position before scoring.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        kv: Var,
        rope: Option<&Rc<RopeCache>>,
    ) -> Result<AttentionOutput> {
        let sq = g.shape(query).to_vec();
        let sk = g.shape(kv).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return crate::error::contract(format!(
                "attention expects [n, L, {}] operands, got {sq:?} and {sk:?}",
                self.dim
            ));
        }
        let (n, lq, lk) = (sq[0], sq[1], sk[1]);
        let dh = self.dim / self.heads;
        let qp = self.q.forward(g, p, query)?;
        let kp = self.k.forward(g, p, kv)?;
        let vp = self.v.forward(g, p, kv)?;
        let mut qh = self.split_heads(g, qp)?;
        let mut kh = self.split_heads(g, kp)?;
        let vh = self.split_heads(g, vp)?;
        if let Some(table) = rope {
            qh = g.rope(qh, table.clone())?;
            kh = g.rope(kh, table.clone())?;
        }
        let scores = g.bmm(qh, kh, true, FlopKind::Attention)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = g.softmax(scores)?;
        let ctx = g.bmm(w, vh, false, FlopKind::Attention)?;
        let ctx = g.reshape(ctx, &[n, self.heads, lq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, lq, self.dim])?;
        let out = self.o.forward(g, p, ctx)?;
        let weights = g.reshape(w, &[n, self.heads, lq, lk])?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, depth)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, depth)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, depth)?,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), dim, hidden, depth)?,
        })
    }

    /// `x[n, L, d]`. `keep` holds one residual-branch factor per sample for
    /// stochastic depth; `None` keeps every branch.
    ///
    /// Products are charged to `<stage>.attention` and `<stage>.ffn`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        rope: Option<&Rc<RopeCache>>,
        keep: Option<&[f64]>,
        stage: &str,
    ) -> Result<Var> {
        g.set_stage(&format!("{stage}.attention"));
        let h = self.ln1.forward(g, p, x)?;
        let mut a = self.attn.forward(g, p, h, h, rope)?.out;
        if let Some(k) = keep {
            a = g.scale_rows(a, k)?;
        }
        let x = g.add(x, a)?;
        g.set_stage(&format!("{stage}.ffn"));
        let h = self.ln2.forward(g, p, x)?;
        let mut f = self.ffn.forward(g, p, h)?;
        if let Some(k) = keep {
            f = g.scale_rows(f, k)?;
        }
        g.add(x, f)
    }
}

/// Rotary tables for positions `0..len` and an even `dim`, base `theta`.
/// Pair `i` rotates at frequency `theta^(-2i/dim)`.
pub fn rope_cache(len: usize, dim: usize, theta: f64) -> Result<RopeCache> {
    if !dim.is_multiple_of(2) {
        return config(format!("rotary embedding needs an even width, got {dim}"));
    }
    let half = dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for pos in 0..len {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    Ok(RopeCache { len, half, cos, sin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut s, &mut rng, "a", 6, 4, 0).is_err());
    }

    #[test]
    fn rope_needs_even_width() {
        assert!(rope_cache(4, 5, 10000.0).is_err());
        let c = rope_cache(3, 4, 10000.0).unwrap();
        assert_eq!(c.cos.len(), 6);
        assert_eq!(c.cos[0], 1.0);
    }
}
