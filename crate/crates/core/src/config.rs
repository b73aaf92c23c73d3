//! Model, loss and optimization hyperparameters with the published presets.

use crate::autograd::conv_out_len;
use crate::error::{config, Result};
use crate::tensor::Precision;
use serde::{Deserialize, Serialize};

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Tiny,
    Base,
    Large,
    Huge,
}

impl std::str::FromStr for ModelSize {
    type Err = crate::error::LunaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "base" => Ok(Self::Base),
            "large" => Ok(Self::Large),
            "huge" => Ok(Self::Huge),
            other => config(format!("unknown model size '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Samples per patch.
    pub patch_size: usize,
    /// Output channels of the three temporal convolution stages. The first
    /// stage reads one channel; later stages read the previous stage's output.
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_strides: [usize; 3],
    pub conv_padding: [usize; 3],
    /// GroupNorm groups after each convolution.
    pub conv_groups: usize,
    /// Number of learned queries `Q`.
    pub num_queries: usize,
    /// Query width `E`.
    pub embed_dim: usize,
    /// Attention heads used throughout.
    pub num_heads: usize,
    /// Transformer layers over the query axis inside the unifier.
    pub unifier_layers: usize,
    /// Hidden width of the unifier feed-forward networks.
    pub unifier_ffn: usize,
    /// Transformer layers of the patch-wise temporal encoder.
    pub temporal_layers: usize,
    /// Hidden width of the temporal feed-forward networks.
    pub mlp_size: usize,
    /// Frequency bands of the electrode position encoding.
    pub freq_bands: usize,
    pub rope_theta: f64,
    /// Stochastic depth rate in the temporal encoder (0 disables it).
    pub drop_path: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(ModelSize::Tiny)
    }
}

impl ModelConfig {
    pub fn preset(size: ModelSize) -> Self {
        let (q, e, layers, heads, mlp, conv) = match size {
            ModelSize::Tiny => (2, 16, 2, 2, 128, 8),
            ModelSize::Base => (4, 64, 8, 8, 1024, 16),
            ModelSize::Large => (6, 96, 10, 12, 2304, 24),
            ModelSize::Huge => (8, 128, 24, 16, 4096, 32),
        };
        Self {
            patch_size: 40,
            conv_channels: [conv; 3],
            conv_kernels: [20, 3, 3],
            conv_strides: [10, 1, 1],
            conv_padding: [9, 1, 1],
            conv_groups: 4,
            num_queries: q,
            embed_dim: e,
            num_heads: heads,
            unifier_layers: 2,
            unifier_ffn: 4 * e,
            temporal_layers: layers,
            mlp_size: mlp,
            freq_bands: 10,
            rope_theta: 10_000.0,
            drop_path: 0.0,
            precision: Precision::Double,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(ModelSize::Tiny)
    }

    pub fn base() -> Self {
        Self::preset(ModelSize::Base)
    }

    /// Width of each temporal token, `Q·E`.
    pub fn hidden_size(&self) -> usize {
        self.num_queries * self.embed_dim
    }

    /// Number of real-DFT features per patch (magnitudes and phases).
    pub fn spectrum_features(&self) -> usize {
        2 * (self.patch_size / 2 + 1)
    }

    /// Raw coordinates plus a sine and cosine per coordinate and band.
    pub fn position_features(&self) -> usize {
        3 + 3 * 2 * self.freq_bands
    }

    /// Spatial length after each convolution stage.
    pub fn conv_lengths(&self) -> Result<[usize; 3]> {
        let mut len = self.patch_size;
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            len = conv_out_len(len, self.conv_kernels[i], self.conv_strides[i], self.conv_padding[i])?;
            *o = len;
        }
        Ok(out)
    }

    pub fn conv_in_channels(&self) -> [usize; 3] {
        [1, self.conv_channels[0], self.conv_channels[1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return config(format!("patch size must be even and positive, got {}", self.patch_size));
        }
        self.conv_lengths()?;
        if self
            .conv_channels
            .iter()
            .any(|&c| c == 0 || c % self.conv_groups.max(1) != 0)
            || self.conv_groups == 0
        {
            return config("conv channels must be divisible by the GroupNorm group count");
        }
        if self.num_queries == 0 || self.embed_dim == 0 {
            return config("queries and embedding width must be positive");
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return config(format!(
                "embedding width {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.hidden_size() / self.num_heads).is_multiple_of(2) {
            return config("rotary embedding needs an even temporal head width");
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return config("drop path rate must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the visible-patch reconstruction term.
    pub alpha: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
    /// Query specialization coefficient.
    pub lambda_spec: f64,
    pub mask_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            lambda_spec: 0.8,
            mask_ratio: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta <= 0.0 || self.lambda_spec < 0.0 {
            return config("loss coefficients require alpha >= 0, beta > 0, lambda_spec >= 0");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return config("mask ratio must lie in [0, 1)");
        }
        Ok(())
    }
}

/// AdamW with linear warmup and cosine decay, all counted in optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Global-norm clipping threshold; non-positive disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Per-depth multiplicative learning-rate factor (fine-tuning only).
    pub layer_decay: Option<f64>,
    /// Validation patience in epochs (fine-tuning only).
    pub patience: Option<usize>,
    pub label_smoothing: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::pretraining(1, 60, 10)
    }
}

impl TrainSchedule {
    /// Pre-training values: peak 1.25e-4 decaying to 2.5e-7, betas
    /// (0.9, 0.98), weight decay 0.05, clipping at 1.
    pub fn pretraining(steps_per_epoch: usize, epochs: usize, warmup_epochs: usize) -> Self {
        Self {
            peak_lr: 1.25e-4,
            min_lr: 2.5e-7,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
            weight_decay: 0.05,
            betas: (0.9, 0.98),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 8,
            layer_decay: None,
            patience: None,
            label_smoothing: 0.0,
        }
    }

    /// Fine-tuning values: peak 1e-4 decaying to 5e-6, betas (0.9, 0.999),
    /// layer decay 0.5, patience 10, label smoothing 0.1.
    pub fn finetuning(steps_per_epoch: usize, epochs: usize, warmup_epochs: usize) -> Self {
        Self {
            peak_lr: 1e-4,
            min_lr: 5e-6,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 8,
            layer_decay: Some(0.5),
            patience: Some(10),
            label_smoothing: 0.1,
        }
    }

    /// Learning rate at zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak_lr < 0.0 || self.min_lr < 0.0 || self.batch_size == 0 {
            return config("learning rates must be non-negative and batch size positive");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return config("Adam moment coefficients must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return config("label smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}
