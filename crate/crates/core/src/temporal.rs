//! Patch-wise temporal encoder: bidirectional pre-norm transformer blocks
//! with rotary position embeddings over the `S` latent tokens.

use crate::autograd::{Graph, RopeCache, Var};
use crate::config::ModelConfig;
use crate::error::{config, Result};
use crate::flops::{FlopKind, FlopLedger};
use crate::nn::{rope_cache, LayerNorm, TransformerBlock};
use crate::params::{Bound, ParamStore};
use rand::Rng;
use std::rc::Rc;

pub const STAGE: &str = "temporal";

/// Rotate consecutive pairs of each row of `x[S, D]` by the angle of its
/// position, frequency `theta^(-2i/D)` for pair `i`.
pub fn rope_rotate(x: &[f64], dim: usize, positions: &[usize], theta: f64) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return config(format!("rotary embedding needs an even width, got {dim}"));
    }
    if x.len() != dim * positions.len() {
        return crate::error::contract("one position per row required");
    }
    let mut out = x.to_vec();
    for (row, &pos) in out.chunks_mut(dim).zip(positions) {
        for i in 0..dim / 2 {
            let angle = pos as f64 * theta.powf(-2.0 * i as f64 / dim as f64);
            let (s, c) = angle.sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub heads: usize,
    pub width: usize,
    pub theta: f64,
    pub drop_path: f64,
}

impl TemporalEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_size();
        let blocks = (0..cfg.temporal_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("temporal.block{i}"),
                    d,
                    cfg.num_heads,
                    cfg.mlp_size,
                    2 + i,
                )
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "temporal.norm", d, 2 + cfg.temporal_layers)?;
        Ok(Self {
            blocks,
            norm,
            heads: cfg.num_heads,
            width: d,
            theta: cfg.rope_theta,
            drop_path: cfg.drop_path,
        })
    }

    pub fn rope_table(&self, len: usize) -> Result<Rc<RopeCache>> {
        Ok(Rc::new(rope_cache(len, self.width / self.heads, self.theta)?))
    }

    /// `latent[B, S, D]` to `[B, S, D]`. When `rng` is given and the drop-path
    /// rate is positive, each block's residual branches are dropped per
    /// sample with linearly increasing probability up to the configured rate.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        latent: Var,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let shape = g.shape(latent).to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] != self.width {
            return crate::error::contract(format!(
                "temporal encoder expects [B, S, {}], got {shape:?}",
                self.width
            ));
        }
        let rope = self.rope_table(shape[1])?;
        let mut x = latent;
        let layers = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let keep = match rng.as_deref_mut() {
                Some(r) if self.drop_path > 0.0 => {
                    let rate = self.drop_path * (i + 1) as f64 / layers as f64;
                    Some(
                        (0..shape[0])
                            .map(|_| {
                                if r.random::<f64>() < rate {
                                    0.0
                                } else {
                                    1.0 / (1.0 - rate)
                                }
                            })
                            .collect::<Vec<f64>>(),
                    )
                }
                _ => None,
            };
            x = block.forward(g, p, x, Some(&rope), keep.as_deref(), STAGE)?;
        }
        self.norm.forward(g, p, x)
    }
}

/// Products charged by [`TemporalEncoder::forward`] on `B` sequences of `S`
/// tokens.
pub fn temporal_flops(cfg: &ModelConfig, batch: usize, patches: usize) -> FlopLedger {
    let (b, s) = (batch as u64, patches as u64);
    let (d, m) = (cfg.hidden_size() as u64, cfg.mlp_size as u64);
    let mut l = FlopLedger::new();
    let attn = format!("{STAGE}.attention");
    let ffn = format!("{STAGE}.ffn");
    for _ in 0..cfg.temporal_layers {
        l.charge(&attn, FlopKind::Dense, 8 * b * s * d * d);
        l.charge(&attn, FlopKind::Attention, 4 * b * s * s * d);
        l.charge(&ffn, FlopKind::Dense, 4 * b * s * d * m);
    }
    l
}
