//! Per-(channel, patch) tokens: temporal convolution features, Fourier
//! features, electrode position codes and masking.
//!
//! Token tensors are laid out `[B, S, C, E]` so that one patch instance's
//! channel tokens are contiguous and a `[C, E]` position code broadcasts over
//! the leading axes.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{config, contract, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::signal::{EegSegment, MontageLayout};
use crate::tensor::Tensor;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Raw patches cut from a batch of equally-shaped segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub batch: usize,
    pub patches: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// `[B, S, C, P]`
    pub data: Vec<f64>,
}

impl Patches {
    /// Split every channel into `T / P` consecutive patches.
    pub fn from_segments(segments: &[&EegSegment], patch_size: usize) -> Result<Self> {
        let Some(first) = segments.first() else {
            return contract("empty batch");
        };
        let (c, t) = (first.channels(), first.samples());
        if patch_size == 0 || t % patch_size != 0 || t == 0 {
            return config(format!(
                "segment length {t} is not a multiple of patch size {patch_size}"
            ));
        }
        if segments.iter().any(|s| s.channels() != c || s.samples() != t) {
            return contract("segments in a batch must share channel count and length");
        }
        let s_len = t / patch_size;
        let mut data = Vec::with_capacity(segments.len() * c * t);
        for seg in segments {
            for s in 0..s_len {
                for ch in 0..c {
                    data.extend_from_slice(&seg.channel(ch)[s * patch_size..(s + 1) * patch_size]);
                }
            }
        }
        Ok(Self {
            batch: segments.len(),
            patches: s_len,
            channels: c,
            patch_size,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.patches * self.channels
    }

    /// Patch values of `(b, c, s)`.
    pub fn patch(&self, b: usize, c: usize, s: usize) -> &[f64] {
        let row = (b * self.patches + s) * self.channels + c;
        &self.data[row * self.patch_size..(row + 1) * self.patch_size]
    }

    /// Samples laid out `[B, C, S, P]`, the reconstruction target order.
    pub fn channel_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            for c in 0..self.channels {
                for s in 0..self.patches {
                    out.extend_from_slice(self.patch(b, c, s));
                }
            }
        }
        out
    }
}

/// Magnitudes and phases of a real-input DFT without normalization.
pub struct SpectrumPlan {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
}

impl SpectrumPlan {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(2) {
            return config(format!("spectrum needs an even patch size, got {size}"));
        }
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(size),
            size,
        })
    }

    /// `P/2 + 1` magnitudes followed by `P/2 + 1` phases in `(-π, π]`.
    pub fn features(&self, patch: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = patch.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        let bins = self.size / 2 + 1;
        let mut out = Vec::with_capacity(2 * bins);
        out.extend(buf[..bins].iter().map(|z| z.norm()));
        out.extend(buf[..bins].iter().map(|z| z.im.atan2(z.re)));
        out
    }

    /// Features of every row of `[N, P]` data, `[N, P + 2]`.
    pub fn batch(&self, data: &[f64]) -> Vec<f64> {
        data.chunks(self.size).flat_map(|p| self.features(p)).collect()
    }
}

/// Raw coordinates, then `sin(2^j·π·c)` and `cos(2^j·π·c)` for each
/// coordinate and band `j`.
pub fn position_features(pos: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&pos);
    for c in pos {
        for j in 0..bands {
            let a = (1u64 << j) as f64 * std::f64::consts::PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Three convolution stages, each followed by GroupNorm and GELU, flattened
/// and projected to `E`.
#[derive(Debug, Clone)]
pub struct TemporalEmbedding {
    conv_w: [ParamId; 3],
    conv_b: [ParamId; 3],
    norm_g: [ParamId; 3],
    norm_b: [ParamId; 3],
    proj: Linear,
    strides: [usize; 3],
    padding: [usize; 3],
    groups: usize,
    patch_size: usize,
}

impl TemporalEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let lengths = cfg.conv_lengths()?;
        let cin = cfg.conv_in_channels();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut norm_g = Vec::new();
        let mut norm_b = Vec::new();
        for (i, &ci) in cin.iter().enumerate() {
            let (co, k) = (cfg.conv_channels[i], cfg.conv_kernels[i]);
            let bound = 1.0 / ((ci * k) as f64).sqrt();
            conv_w.push(store.add(
                format!("embed.conv{i}.weight"),
                Tensor::uniform(&[co, ci, k], bound, rng),
                0,
            )?);
            conv_b.push(store.add(format!("embed.conv{i}.bias"), Tensor::zeros(&[co]), 0)?);
            norm_g.push(store.add(format!("embed.norm{i}.gamma"), Tensor::filled(&[co], 1.0), 0)?);
            norm_b.push(store.add(format!("embed.norm{i}.beta"), Tensor::zeros(&[co]), 0)?);
        }
        let flat = cfg.conv_channels[2] * lengths[2];
        let proj = Linear::new(store, rng, "embed.temporal_proj", flat, cfg.embed_dim, 0)?;
        let arr = |v: Vec<ParamId>| -> [ParamId; 3] { [v[0], v[1], v[2]] };
        Ok(Self {
            conv_w: arr(conv_w),
            conv_b: arr(conv_b),
            norm_g: arr(norm_g),
            norm_b: arr(norm_b),
            proj,
            strides: cfg.conv_strides,
            padding: cfg.conv_padding,
            groups: cfg.conv_groups,
            patch_size: cfg.patch_size,
        })
    }

    /// `patches[N, P]` to `[N, E]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        let n = g.value(patches).len() / self.patch_size;
        let mut x = g.reshape(patches, &[n, 1, self.patch_size])?;
        for i in 0..3 {
            x = g.conv1d(
                x,
                p[self.conv_w[i]],
                p[self.conv_b[i]],
                self.strides[i],
                self.padding[i],
            )?;
            x = g.group_norm(x, self.groups, p[self.norm_g[i]], p[self.norm_b[i]])?;
            x = g.gelu(x);
        }
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[n, s[1] * s[2]])?;
        self.proj.forward(g, p, x)
    }
}

/// Two-layer perceptron `Linear → GELU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: (usize, usize, usize),
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, rng, &format!("{name}.0"), dims.0, dims.1, depth)?,
            l2: Linear::new(store, rng, &format!("{name}.1"), dims.1, dims.2, depth)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, p, h)
    }
}

/// Head-free embedding of a batch of patches plus the montage position code.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub temporal: TemporalEmbedding,
    pub frequency: Mlp,
    pub position: Mlp,
    pub mask_token: ParamId,
    pub embed_dim: usize,
    pub freq_bands: usize,
}

/// Embedded tokens with the applied mask.
pub struct PatchGrid {
    /// `[B, S, C, E]`
    pub tokens: Var,
    /// Row-aligned with `tokens`: index `(b·S + s)·C + c`.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub patches: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn is_masked(&self, b: usize, c: usize, s: usize) -> bool {
        self.mask[(b * self.patches + s) * self.channels + c]
    }

    /// Mask reordered to `[B, C, S]`.
    pub fn mask_channel_major(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.mask.len());
        for b in 0..self.batch {
            for c in 0..self.channels {
                for s in 0..self.patches {
                    out.push(self.is_masked(b, c, s));
                }
            }
        }
        out
    }
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        let temporal = TemporalEmbedding::new(store, rng, cfg)?;
        let frequency = Mlp::new(store, rng, "embed.frequency", (cfg.spectrum_features(), e, e), 0)?;
        let position = Mlp::new(store, rng, "embed.position", (cfg.position_features(), e, e), 0)?;
        let mask_token = store.add("embed.mask_token", Tensor::randn(&[e], 0.02, rng), 0)?;
        Ok(Self {
            temporal,
            frequency,
            position,
            mask_token,
            embed_dim: e,
            freq_bands: cfg.freq_bands,
        })
    }

    /// Position code `[C, E]` for a montage.
    pub fn position_code(&self, g: &mut Graph, p: &Bound, montage: &MontageLayout) -> Result<Var> {
        let feats: Vec<Vec<f64>> = montage
            .positions()
            .iter()
            .map(|&pos| position_features(pos, self.freq_bands))
            .collect();
        let x = g.constant(Tensor::from_rows(&feats)?);
        self.position.forward(g, p, x)
    }

    /// Embed `patches`, replace the rows flagged in `mask` (`[B, S, C]` order)
    /// by the mask token, then add the montage position code.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: &Patches,
        montage: &MontageLayout,
        mask: Option<Vec<bool>>,
    ) -> Result<PatchGrid> {
        if montage.len() != patches.channels {
            return contract(format!(
                "montage has {} channels, patches have {}",
                montage.len(),
                patches.channels
            ));
        }
        let n = patches.tokens();
        let mask = mask.unwrap_or_else(|| vec![false; n]);
        if mask.len() != n {
            return contract("mask length differs from token count");
        }
        let (b, s, c, e) = (patches.batch, patches.patches, patches.channels, self.embed_dim);
        g.set_stage("embed.temporal");
        let raw = g.constant(Tensor::new(vec![n, patches.patch_size], patches.data.clone())?);
        let t = self.temporal.forward(g, p, raw)?;
        g.set_stage("embed.frequency");
        let plan = SpectrumPlan::new(patches.patch_size)?;
        let spec = plan.batch(&patches.data);
        let width = spec.len() / n;
        let spec = g.constant(Tensor::new(vec![n, width], spec)?);
        let f = self.frequency.forward(g, p, spec)?;
        let x = g.add(t, f)?;
        let x = if mask.iter().any(|&m| m) {
            g.mask_rows(x, p[self.mask_token], &mask)?
        } else {
            x
        };
        g.set_stage("embed.position");
        let pos = self.position_code(g, p, montage)?;
        let x = g.reshape(x, &[b, s, c, e])?;
        let tokens = g.add_broadcast(x, pos)?;
        Ok(PatchGrid {
            tokens,
            mask,
            batch: b,
            patches: s,
            channels: c,
        })
    }
}

/// Choose exactly `round(ratio·C·S)` masked tokens per sample, uniformly
/// without replacement. Returned in `[B, S, C]` order.
pub fn sample_mask<R: Rng + ?Sized>(
    batch: usize,
    patches: usize,
    channels: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return config(format!("mask ratio must lie in [0, 1), got {ratio}"));
    }
    let per = patches * channels;
    let count = (ratio * per as f64).round() as usize;
    let mut mask = vec![false; batch * per];
    for b in 0..batch {
        for i in rand::seq::index::sample(rng, per, count) {
            mask[b * per + i] = true;
        }
    }
    Ok(mask)
}
