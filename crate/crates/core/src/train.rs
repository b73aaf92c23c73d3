//! Masked-reconstruction pre-training and classification fine-tuning loops.

use crate::autograd::{Graph, Var};
use crate::config::{LossConfig, TrainSchedule};
use crate::embedding::{sample_mask, Patches};
use crate::error::{config, LunaError, Result};
use crate::losses::{reconstruction_loss_node, reconstruction_terms, specialization_loss_node, ReconTerms};
use crate::metrics::{evaluate, ClassificationMetrics};
use crate::model::Luna;
use crate::optim::{clip_global_norm, AdamW};
use crate::params::Bound;
use crate::signal::{EegSegment, MontageLayout};
use crate::synth::Dataset;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Pre-training objective on one batch.
pub struct Objective {
    /// `L_rec + L_spec`
    pub total: Var,
    /// `[B, C, S, P]`
    pub recon: Var,
    pub terms: ReconTerms,
    pub spec: f64,
    /// `[B, C, S]`
    pub mask: Vec<bool>,
}

/// Build the pre-training loss for `patches` with the token `mask`
/// (`[B, S, C]` order, as produced by [`sample_mask`]).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_objective(
    model: &Luna,
    g: &mut Graph,
    p: &Bound,
    patches: &Patches,
    montage: &MontageLayout,
    mask: Vec<bool>,
    loss: &LossConfig,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<Objective> {
    let enc = model.encode(g, p, patches, montage, Some(mask), drop_rng)?;
    let recon = model.reconstruct(g, p, enc.e_out, montage)?;
    g.set_stage("loss");
    let target = patches.channel_major();
    let mask = enc.grid.mask_channel_major();
    let rec = reconstruction_loss_node(g, recon, &target, &mask, loss)?;
    let spec = specialization_loss_node(g, enc.affinity.values, loss.lambda_spec)?;
    let total = g.add(rec, spec)?;
    let terms = reconstruction_terms(&target, g.value(recon).data(), &mask, loss.beta)?;
    let spec = g.value(spec).item()?;
    Ok(Objective {
        total,
        recon,
        terms,
        spec,
        mask,
    })
}

/// One row of the pre-training loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_rec_masked: f64,
    pub l_rec_visible: f64,
    pub l_spec: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn total(&self, alpha: f64) -> f64 {
        self.l_rec_masked + alpha * self.l_rec_visible + self.l_spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub steps: usize,
    pub seed: u64,
}

fn check_dataset(model: &Luna, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return config("dataset is empty");
    }
    if data.segments.iter().any(|s| s.samples() % model.config.patch_size != 0) {
        return config(format!(
            "segment length must be a multiple of the patch size {}",
            model.config.patch_size
        ));
    }
    Ok(())
}

/// Epoch-shuffled batch index stream.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n).max(1),
        }
    }

    fn next<R: RngCore>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

fn divergence(step: usize, what: &str, v: f64) -> LunaError {
    LunaError::Divergence {
        step,
        detail: format!("{what} became {v}"),
    }
}

/// Masked-reconstruction pre-training. Returns the per-step loss trace.
pub fn pretrain(model: &mut Luna, data: &Dataset, opts: &PretrainOptions) -> Result<Vec<LossRecord>> {
    check_dataset(model, data)?;
    opts.schedule.validate()?;
    opts.loss.validate()?;
    model.extend_bank(&data.montage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(&model.store);
    let mut batches = Batches::new(data.len(), opts.schedule.batch_size);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let idx = batches.next(&mut rng);
        let segs: Vec<&EegSegment> = idx.iter().map(|&i| &data.segments[i]).collect();
        let patches = Patches::from_segments(&segs, model.config.patch_size)?;
        let mask = sample_mask(
            patches.batch,
            patches.patches,
            patches.channels,
            opts.loss.mask_ratio,
            &mut rng,
        )?;
        let mut g = model.graph();
        let p = model.store.bind(&mut g);
        let obj = pretrain_objective(
            model,
            &mut g,
            &p,
            &patches,
            &data.montage,
            mask,
            &opts.loss,
            Some(&mut rng as &mut dyn RngCore),
        )?;
        let total = g.value(obj.total).item()?;
        if !total.is_finite() {
            return Err(divergence(step + 1, "total loss", total));
        }
        let grads = g.backward(obj.total)?;
        let mut grads = p.collect_grads(&grads, &model.store);
        let norm = clip_global_norm(&mut grads, opts.schedule.grad_clip);
        if !norm.is_finite() {
            return Err(divergence(step + 1, "gradient norm", norm));
        }
        let lr = opts.schedule.lr(step);
        opt.update(&mut model.store, &grads, lr, &opts.schedule, None)?;
        trace.push(LossRecord {
            step: step + 1,
            l_rec_masked: obj.terms.masked,
            l_rec_visible: obj.terms.visible,
            l_spec: obj.spec,
            lr,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub schedule: TrainSchedule,
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Keep the reconstruction decoder fixed (it takes no part in the loss).
    pub freeze_decoder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub monitor_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
    pub train: ClassificationMetrics,
    pub validation: Option<ClassificationMetrics>,
}

fn labels_of(data: &Dataset, n_classes: usize) -> Result<Vec<usize>> {
    data.segments
        .iter()
        .map(|s| match s.label {
            Some(l) if (l as usize) < n_classes => Ok(l as usize),
            Some(l) => config(format!("label {l} outside {n_classes} classes")),
            None => config("fine-tuning requires labeled segments"),
        })
        .collect()
}

/// Class probabilities for every segment, batched by `batch`.
pub fn predict_proba(model: &Luna, data: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.segments.chunks(batch.max(1)) {
        let segs: Vec<&EegSegment> = chunk.iter().collect();
        let logits = model
            .infer(&segs)?
            .logits
            .ok_or_else(|| LunaError::Contract("model has no classification head".into()))?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let mut r = row.to_vec();
            crate::autograd::softmax_rows(&mut r, k);
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean unsmoothed cross-entropy over `data`.
fn mean_cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let s: f64 = probs.iter().zip(labels).map(|(p, &l)| -p[l].max(1e-300).ln()).sum();
    s / labels.len().max(1) as f64
}

/// Supervised fine-tuning with layer-wise learning-rate decay and early
/// stopping on the validation loss (training loss without a validation set).
/// The best parameters seen are restored at the end.
pub fn finetune(
    model: &mut Luna,
    train: &Dataset,
    val: Option<&Dataset>,
    n_classes: usize,
    opts: &FinetuneOptions,
) -> Result<FinetuneReport> {
    check_dataset(model, train)?;
    opts.schedule.validate()?;
    model.attach_classifier(n_classes)?;
    let train_labels = labels_of(train, n_classes)?;
    let val_labels = val.map(|v| labels_of(v, n_classes)).transpose()?;
    let smoothing = if n_classes > 2 {
        opts.schedule.label_smoothing
    } else {
        0.0
    };
    let trainable: Vec<bool> = model
        .store
        .iter()
        .map(|(name, _)| !(opts.freeze_decoder && name.starts_with("decoder.")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(&model.store);
    let mut batches = Batches::new(train.len(), opts.schedule.batch_size);
    let steps_per_epoch = train.len().div_ceil(batches.size);
    let eval_batch = opts.schedule.batch_size.max(16);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    'epochs: for epoch in 1..=opts.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for _ in 0..steps_per_epoch {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let idx = batches.next(&mut rng);
            let segs: Vec<&EegSegment> = idx.iter().map(|&i| &train.segments[i]).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let patches = Patches::from_segments(&segs, model.config.patch_size)?;
            let mut g = model.graph();
            let p = model.store.bind(&mut g);
            let enc = model.encode(
                &mut g,
                &p,
                &patches,
                &train.montage,
                None,
                Some(&mut rng as &mut dyn RngCore),
            )?;
            let logits = model.classify(&mut g, &p, enc.e_out)?;
            let loss = g.cross_entropy(logits, &targets, smoothing)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(divergence(step + 1, "classification loss", value));
            }
            let grads = g.backward(loss)?;
            let mut grads = p.collect_grads(&grads, &model.store);
            clip_global_norm(&mut grads, opts.schedule.grad_clip);
            let lr = opts.schedule.lr(step);
            opt.update(&mut model.store, &grads, lr, &opts.schedule, Some(&trainable))?;
            epoch_loss += value;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        let monitor = match (val, &val_labels) {
            (Some(v), Some(l)) => mean_cross_entropy(&predict_proba(model, v, eval_batch)?, l),
            _ => epoch_loss / epoch_steps as f64,
        };
        history.push(EpochRecord {
            epoch,
            steps: step,
            train_loss: epoch_loss / epoch_steps as f64,
            monitor_loss: monitor,
        });
        if monitor < best.0 {
            best = (monitor, epoch, model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if opts.schedule.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if best.1 > 0 {
        model.store = best.2;
    }
    let train_metrics = evaluate(&train_labels, &predict_proba(model, train, eval_batch)?)?;
    let validation = match (val, &val_labels) {
        (Some(v), Some(l)) => Some(evaluate(l, &predict_proba(model, v, eval_batch)?)?),
        _ => None,
    };
    Ok(FinetuneReport {
        history,
        best_epoch: best.1,
        stopped_early,
        steps: step,
        train: train_metrics,
        validation,
    })
}
