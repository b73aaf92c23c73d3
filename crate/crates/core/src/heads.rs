//! Output heads: channel-indexed reconstruction for pre-training and a single
//! aggregation query followed by an MLP for classification.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::embedding::Mlp;
use crate::error::{contract, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::signal::MontageLayout;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;

pub const STAGE_DECODER: &str = "decoder";
pub const STAGE_HEAD: &str = "head";

/// Standard deviation of freshly created decoder queries.
pub const QUERY_INIT_STD: f64 = 0.02;

pub(crate) const QUERY_PREFIX: &str = "decoder.query.";

fn bank_key(label: &str) -> String {
    label.to_ascii_uppercase()
}

/// Learned decoder query per channel label.
#[derive(Debug, Clone, Default)]
pub struct DecoderQueryBank {
    entries: IndexMap<String, ParamId>,
    embed_dim: usize,
}

impl DecoderQueryBank {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            entries: IndexMap::new(),
            embed_dim,
        }
    }

    /// Rebuild the bank from parameters already present in `store`.
    pub fn from_store(store: &ParamStore, embed_dim: usize) -> Self {
        let entries = store
            .iter()
            .filter_map(|(name, _)| name.strip_prefix(QUERY_PREFIX).map(|l| (l.to_string(), store.id(name))))
            .filter_map(|(l, id)| id.map(|id| (l, id)))
            .collect();
        Self { entries, embed_dim }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn get(&self, label: &str) -> Option<ParamId> {
        self.entries.get(&bank_key(label)).copied()
    }

    /// Add Gaussian-initialized entries for any label of `montage` not yet in
    /// the bank. Returns the number of new entries.
    pub fn extend<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
        montage: &MontageLayout,
        depth: usize,
    ) -> Result<usize> {
        let mut added = 0;
        for label in montage.labels() {
            let key = bank_key(label);
            if self.entries.contains_key(&key) {
                continue;
            }
            let id = store.add(
                format!("{QUERY_PREFIX}{key}"),
                Tensor::randn(&[self.embed_dim], QUERY_INIT_STD, rng),
                depth,
            )?;
            self.entries.insert(key, id);
            added += 1;
        }
        Ok(added)
    }

    /// Queries of `montage` in channel order, `[C, E]`.
    pub fn queries(&self, g: &mut Graph, p: &Bound, montage: &MontageLayout) -> Result<Var> {
        let vars = montage
            .labels()
            .iter()
            .map(|l| {
                self.get(l)
                    .map(|id| p[id])
                    .ok_or_else(|| crate::error::LunaError::MissingElectrode(l.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        g.stack(&vars)
    }
}

/// Cross-attention from per-channel decoder queries to the `Q` latent
/// tokens of each patch, then a linear map to `P` samples.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub bank: DecoderQueryBank,
    pub attn: MultiHeadAttention,
    pub proj: Linear,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub depth: usize,
}

impl ReconstructionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, depth: usize) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(Self {
            bank: DecoderQueryBank::new(e),
            attn: MultiHeadAttention::new(store, rng, "decoder.attn", e, cfg.num_heads, depth)?,
            proj: Linear::new(store, rng, "decoder.proj", e, cfg.patch_size, depth)?,
            num_queries: cfg.num_queries,
            embed_dim: e,
            depth,
        })
    }

    /// `e_out[B, S, Q·E]` to reconstructed patches `[B, C, S, P]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, e_out: Var, montage: &MontageLayout) -> Result<Var> {
        let s = g.shape(e_out).to_vec();
        if s.len() != 3 || s[2] != self.num_queries * self.embed_dim {
            return contract(format!("reconstruction expects [B, S, Q·E], got {s:?}"));
        }
        let (b, sl) = (s[0], s[1]);
        let c = montage.len();
        g.set_stage(STAGE_DECODER);
        let kv = g.reshape(e_out, &[b * sl, self.num_queries, self.embed_dim])?;
        let q = self.bank.queries(g, p, montage)?;
        let q = g.repeat(q, b * sl);
        let z = self.attn.forward(g, p, q, kv, None)?.out;
        let y = self.proj.forward(g, p, z)?;
        let ps = g.shape(y)[2];
        let y = g.reshape(y, &[b, sl, c, ps])?;
        g.permute(y, &[0, 2, 1, 3])
    }
}

/// Single learned query pooling the temporal tokens, then LayerNorm and a
/// two-layer MLP.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub query: ParamId,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub width: usize,
    pub n_classes: usize,
}

impl ClassificationHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        n_classes: usize,
        depth: usize,
    ) -> Result<Self> {
        if n_classes < 2 {
            return crate::error::config("classification needs at least two classes");
        }
        let d = cfg.hidden_size();
        Ok(Self {
            query: store.add("head.query", Tensor::randn(&[1, d], QUERY_INIT_STD, rng), depth)?,
            attn: MultiHeadAttention::new(store, rng, "head.attn", d, cfg.num_heads, depth)?,
            norm: LayerNorm::new(store, "head.norm", d, depth)?,
            mlp: Mlp::new(store, rng, "head.mlp", (d, d, n_classes), depth)?,
            width: d,
            n_classes,
        })
    }

    /// `e_out[B, S, D]` to logits `[B, K]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, e_out: Var) -> Result<Var> {
        let s = g.shape(e_out).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return contract(format!("classification expects [B, S, {}], got {s:?}", self.width));
        }
        g.set_stage(STAGE_HEAD);
        let q = g.repeat(p[self.query], s[0]);
        let pooled = self.attn.forward(g, p, q, e_out, None)?.out;
        let pooled = g.reshape(pooled, &[s[0], self.width])?;
        let h = self.norm.forward(g, p, pooled)?;
        self.mlp.forward(g, p, h)
    }
}
