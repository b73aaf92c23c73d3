//! Channel unification: learned queries cross-attend over the channel tokens
//! of every patch instance, producing a fixed `Q×E` latent whatever the
//! number of channels.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{config, contract, Result};
use crate::flops::{FlopKind, FlopLedger};
use crate::nn::{Ffn, LayerNorm, MultiHeadAttention, TransformerBlock};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

pub const STAGE_CROSS: &str = "unify.cross_attention";
pub const STAGE_FFN: &str = "unify.ffn";
pub const STAGE_QUERY_SELF: &str = "unify.query_self_attention";

/// Rows orthonormalized with modified Gram–Schmidt (the `Q` factor of a QR
/// decomposition of the transposed Gaussian draw).
pub fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if rows > cols {
        return config(format!("cannot draw {rows} orthonormal rows of width {cols}"));
    }
    loop {
        let mut m = Tensor::randn(&[rows, cols], 1.0, rng).into_data();
        let mut ok = true;
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = (0..cols).map(|k| m[i * cols + k] * m[j * cols + k]).sum();
                for k in 0..cols {
                    m[i * cols + k] -= dot * m[j * cols + k];
                }
            }
            let norm = (0..cols).map(|k| m[i * cols + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..cols {
                m[i * cols + k] /= norm;
            }
        }
        if ok {
            return Tensor::new(vec![rows, cols], m);
        }
    }
}

/// Unified representation of every patch instance.
#[derive(Debug, Clone, Copy)]
pub struct LatentState {
    /// `[B·S, Q, E]`
    pub unified: Var,
    pub batch: usize,
    pub patches: usize,
}

impl LatentState {
    /// The same values viewed as `[B, S, Q·E]`.
    pub fn temporal_view(&self, g: &mut Graph) -> Result<Var> {
        let s = g.shape(self.unified).to_vec();
        g.reshape(self.unified, &[self.batch, self.patches, s[1] * s[2]])
    }
}

/// Head-averaged cross-attention weights `[B·S, Q, C]`.
#[derive(Debug, Clone, Copy)]
pub struct AffinityMatrix {
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct Unifier {
    pub queries: ParamId,
    pub cross: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Ffn,
    pub blocks: Vec<TransformerBlock>,
    pub num_queries: usize,
    pub embed_dim: usize,
}

impl Unifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let (q, e) = (cfg.num_queries, cfg.embed_dim);
        let queries = store.add("unify.queries", orthonormal_rows(q, e, rng)?, 1)?;
        let cross = MultiHeadAttention::new(store, rng, "unify.cross", e, cfg.num_heads, 1)?;
        let ffn_norm = LayerNorm::new(store, "unify.ffn_norm", e, 1)?;
        let ffn = Ffn::new(store, rng, "unify.ffn", e, cfg.unifier_ffn, 1)?;
        let blocks = (0..cfg.unifier_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("unify.block{i}"),
                    e,
                    cfg.num_heads,
                    cfg.unifier_ffn,
                    1,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            cross,
            ffn_norm,
            ffn,
            blocks,
            num_queries: q,
            embed_dim: e,
        })
    }

    /// `tokens[B·S, C, E]` to the latent state and the affinity matrix.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        batch: usize,
        patches: usize,
    ) -> Result<(LatentState, AffinityMatrix)> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[0] != batch * patches || shape[1] == 0 || shape[2] != self.embed_dim {
            return contract(format!(
                "unify expects [{}, C, {}] tokens, got {shape:?}",
                batch * patches,
                self.embed_dim
            ));
        }
        let n = shape[0];
        g.set_stage(STAGE_CROSS);
        let q = g.repeat(p[self.queries], n);
        let att = self.cross.forward(g, p, q, tokens, None)?;
        let heads = self.cross.heads;
        let summed = g.sum_axis(att.weights, 1)?;
        let affinity = g.scale(summed, 1.0 / heads as f64);
        g.set_stage(STAGE_FFN);
        let h = self.ffn_norm.forward(g, p, att.out)?;
        let h = self.ffn.forward(g, p, h)?;
        let mut x = g.add(att.out, h)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, None, None, STAGE_QUERY_SELF)?;
        }
        Ok((
            LatentState {
                unified: x,
                batch,
                patches,
            },
            AffinityMatrix { values: affinity },
        ))
    }
}

/// Products charged by [`Unifier::forward`] on `B·S` instances of `C`
/// channels.
pub fn unify_flops(cfg: &ModelConfig, batch: usize, patches: usize, channels: usize) -> FlopLedger {
    let n = (batch * patches) as u64;
    let (q, e, f, c) = (
        cfg.num_queries as u64,
        cfg.embed_dim as u64,
        cfg.unifier_ffn as u64,
        channels as u64,
    );
    let mut l = FlopLedger::new();
    // query and output projections on Q rows, key and value projections on C rows
    l.charge(STAGE_CROSS, FlopKind::Dense, 4 * n * q * e * e + 4 * n * c * e * e);
    l.charge(STAGE_CROSS, FlopKind::Attention, 4 * n * q * c * e);
    l.charge(STAGE_FFN, FlopKind::Dense, 4 * n * q * e * f);
    for _ in 0..cfg.unifier_layers {
        let attn = format!("{STAGE_QUERY_SELF}.attention");
        l.charge(&attn, FlopKind::Dense, 8 * n * q * e * e);
        l.charge(&attn, FlopKind::Attention, 4 * n * q * q * e);
        l.charge(&format!("{STAGE_QUERY_SELF}.ffn"), FlopKind::Dense, 4 * n * q * e * f);
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = orthonormal_rows(4, 64, &mut rng).unwrap();
        let d = t.data();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..64).map(|k| d[i * 64 + k] * d[j * 64 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
        assert!(orthonormal_rows(5, 4, &mut rng).is_err());
    }

    #[test]
    fn cross_term_linear_in_channels() {
        let cfg = ModelConfig::base();
        let a = unify_flops(&cfg, 2, 4, 10);
        let b = unify_flops(&cfg, 2, 4, 20);
        assert_eq!(
            b.attention_flops - a.attention_flops,
            a.attention_flops - unify_flops(&cfg, 2, 4, 0).attention_flops
        );
        assert_eq!(a.stage_prefix(STAGE_QUERY_SELF), b.stage_prefix(STAGE_QUERY_SELF));
    }
}
