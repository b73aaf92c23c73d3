//! The full encoder with its reconstruction and classification heads.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::embedding::{PatchEmbedding, PatchGrid, Patches};
use crate::error::{contract, Result};
use crate::heads::{ClassificationHead, DecoderQueryBank, ReconstructionHead};
use crate::params::{Bound, ParamStore};
use crate::signal::{EegSegment, MontageLayout};
use crate::temporal::TemporalEncoder;
use crate::tensor::Tensor;
use crate::unifier::{AffinityMatrix, LatentState, Unifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Encoder outputs for one batch.
pub struct Encoded {
    pub grid: PatchGrid,
    pub latent: LatentState,
    pub affinity: AffinityMatrix,
    /// `[B, S, Q·E]`
    pub e_out: Var,
}

#[derive(Debug, Clone)]
pub struct Luna {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: PatchEmbedding,
    pub unifier: Unifier,
    pub temporal: TemporalEncoder,
    pub decoder: ReconstructionHead,
    pub classifier: Option<ClassificationHead>,
    rng: ChaCha8Rng,
}

impl Luna {
    /// Fresh model with all parameters drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = PatchEmbedding::new(&mut store, &mut rng, &config)?;
        let unifier = Unifier::new(&mut store, &mut rng, &config)?;
        let temporal = TemporalEncoder::new(&mut store, &mut rng, &config)?;
        let decoder = ReconstructionHead::new(&mut store, &mut rng, &config, config.temporal_layers + 3)?;
        Ok(Self {
            config,
            store,
            embed,
            unifier,
            temporal,
            decoder,
            classifier: None,
            rng,
        })
    }

    /// Rebuild a model around saved parameters. Every parameter of the fresh
    /// architecture must be present with its shape; the only extras allowed
    /// are decoder-bank entries.
    pub fn from_store(config: ModelConfig, n_classes: Option<usize>, saved: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if let Some(k) = n_classes {
            model.attach_classifier(k)?;
        }
        let mut store = ParamStore::new();
        for (name, fresh) in model.store.iter() {
            let Some(entry) = saved.by_name(name) else {
                return contract(format!("checkpoint lacks parameter '{name}'"));
            };
            if entry.tensor.shape() != fresh.tensor.shape() {
                return contract(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    entry.tensor.shape(),
                    fresh.tensor.shape()
                ));
            }
            store.add(name, entry.tensor.clone(), fresh.depth)?;
        }
        for (name, entry) in saved.iter() {
            if store.id(name).is_some() {
                continue;
            }
            if !name.starts_with(crate::heads::QUERY_PREFIX) || entry.tensor.shape() != [model.config.embed_dim] {
                return contract(format!("unexpected parameter '{name}' in checkpoint"));
            }
            store.add(name, entry.tensor.clone(), entry.depth)?;
        }
        model.store = store;
        model.rebind_bank();
        Ok(model)
    }

    /// Depth assigned to both heads; one above the temporal encoder's norm.
    pub fn head_depth(&self) -> usize {
        self.config.temporal_layers + 3
    }

    /// Ensure the decoder bank covers every label of `montage`.
    pub fn extend_bank(&mut self, montage: &MontageLayout) -> Result<usize> {
        let depth = self.head_depth();
        self.decoder.bank.extend(&mut self.store, &mut self.rng, montage, depth)
    }

    /// Attach (or replace the shape of) a classification head.
    pub fn attach_classifier(&mut self, n_classes: usize) -> Result<()> {
        if let Some(c) = &self.classifier {
            if c.n_classes == n_classes {
                return Ok(());
            }
            return contract(format!("model already has a {}-class head", c.n_classes));
        }
        // bank entries stay at the tail of the store so checkpoints list
        // parameters in the same order however the model was assembled
        let bank = self.store.split_tail(self.decoder.bank.len());
        debug_assert!(bank.iter().all(|(n, _)| n.starts_with(crate::heads::QUERY_PREFIX)));
        let depth = self.head_depth();
        self.classifier = Some(ClassificationHead::new(
            &mut self.store,
            &mut self.rng,
            &self.config,
            n_classes,
            depth,
        )?);
        self.store.append(bank)?;
        self.rebind_bank();
        Ok(())
    }

    /// Rebuild decoder-bank handles after the store was replaced wholesale.
    pub fn rebind_bank(&mut self) {
        self.decoder.bank = DecoderQueryBank::from_store(&self.store, self.config.embed_dim);
    }

    pub fn graph(&self) -> Graph {
        Graph::new(self.config.precision)
    }

    /// Run embedding, unification and the temporal encoder.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: &Patches,
        montage: &MontageLayout,
        mask: Option<Vec<bool>>,
        drop_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Encoded> {
        let grid = self.embed.forward(g, p, patches, montage, mask)?;
        let (b, s, c, e) = (grid.batch, grid.patches, grid.channels, self.config.embed_dim);
        let tokens = g.reshape(grid.tokens, &[b * s, c, e])?;
        let (latent, affinity) = self.unifier.forward(g, p, tokens, b, s)?;
        let x = latent.temporal_view(g)?;
        let e_out = self.temporal.forward(g, p, x, drop_rng)?;
        Ok(Encoded {
            grid,
            latent,
            affinity,
            e_out,
        })
    }

    pub fn reconstruct(&self, g: &mut Graph, p: &Bound, e_out: Var, montage: &MontageLayout) -> Result<Var> {
        self.decoder.forward(g, p, e_out, montage)
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, e_out: Var) -> Result<Var> {
        match &self.classifier {
            Some(h) => h.forward(g, p, e_out),
            None => contract("model has no classification head"),
        }
    }

    /// Inference helper: the encoder outputs as plain tensors.
    pub fn infer(&self, segments: &[&EegSegment]) -> Result<Inference> {
        let montage = segment_montage(segments)?;
        let patches = Patches::from_segments(segments, self.config.patch_size)?;
        let mut g = self.graph();
        let p = self.store.bind(&mut g);
        let enc = self.encode(&mut g, &p, &patches, montage, None, None)?;
        let logits = match &self.classifier {
            Some(h) => {
                let l = h.forward(&mut g, &p, enc.e_out)?;
                Some(g.value(l).clone())
            }
            None => None,
        };
        Ok(Inference {
            unified: g.value(enc.latent.unified).clone(),
            affinity: g.value(enc.affinity.values).clone(),
            e_out: g.value(enc.e_out).clone(),
            logits,
        })
    }
}

/// Values produced by [`Luna::infer`].
#[derive(Debug, Clone)]
pub struct Inference {
    /// `[B·S, Q, E]`
    pub unified: Tensor,
    /// `[B·S, Q, C]`
    pub affinity: Tensor,
    /// `[B, S, Q·E]`
    pub e_out: Tensor,
    /// `[B, K]` when a classification head is attached.
    pub logits: Option<Tensor>,
}

/// The montage shared by a batch; every segment must use the same layout.
pub fn segment_montage<'a>(segments: &[&'a EegSegment]) -> Result<&'a MontageLayout> {
    let Some(first) = segments.first() else {
        return contract("empty batch");
    };
    if segments.iter().any(|s| s.montage.labels() != first.montage.labels()) {
        return contract("segments in a batch must share a montage");
    }
    Ok(&first.montage)
}
