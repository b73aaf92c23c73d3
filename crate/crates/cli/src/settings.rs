//! Run configuration read from a TOML file.
//!
//! Values are resolved in three layers: built-in defaults, then the file
//! named by `--config` (or the `LUNA_CONFIG` environment variable), then
//! command-line flags. Every table and key is optional.
//!
//! ```toml
//! size = "tiny"            # tiny | base | large | huge
//! precision = "double"     # double | single
//! seed = 0
//!
//! [pretrain]
//! steps = 200
//! batch_size = 8
//! peak_lr = 1.25e-4
//! min_lr = 2.5e-7
//! warmup_steps = 20
//! weight_decay = 0.05
//! grad_clip = 1.0
//! alpha = 0.05
//! beta = 1.0
//! lambda_spec = 0.8
//! mask_ratio = 0.5
//!
//! [finetune]
//! epochs = 50
//! max_steps = 500          # optional
//! batch_size = 8
//! peak_lr = 1e-4
//! min_lr = 5e-6
//! warmup_steps = 0
//! weight_decay = 0.05
//! layer_decay = 0.5        # 1.0 disables
//! patience = 10            # 0 disables early stopping
//! label_smoothing = 0.1
//! freeze_decoder = true
//! val_every = 5            # every n-th segment is held out; 0 keeps all
//!
//! [preprocess]
//! band = [0.1, 75.0]
//! notch = 60.0             # 0 disables
//! rate = 256.0
//! window = 5.0
//! bipolar = false
//!
//! [bench]
//! axis = "channels"        # channels | patches
//! grid = [8, 16, 32, 64, 128]
//! models = ["luna", "full_attention", "alt_patches", "alt_channels", "linear_attention"]
//! batch = 1
//! patches = 20
//! channels = 20
//! measure = true
//! memory_budget_mb = 256
//! ```

use luna_core::{LossConfig, ModelConfig, ModelSize, Precision, TrainSchedule};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub size: ModelSize,
    pub precision: Precision,
    pub seed: u64,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub preprocess: PreprocessSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            size: ModelSize::Tiny,
            precision: Precision::Double,
            seed: 0,
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            preprocess: PreprocessSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_spec: f64,
    pub mask_ratio: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = TrainSchedule::pretraining(1, 200, 20);
        let l = LossConfig::default();
        Self {
            steps: s.total_steps,
            batch_size: s.batch_size,
            peak_lr: s.peak_lr,
            min_lr: s.min_lr,
            warmup_steps: s.warmup_steps,
            weight_decay: s.weight_decay,
            grad_clip: s.grad_clip,
            alpha: l.alpha,
            beta: l.beta,
            lambda_spec: l.lambda_spec,
            mask_ratio: l.mask_ratio,
        }
    }
}

impl PretrainSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            batch_size: self.batch_size,
            ..TrainSchedule::pretraining(1, self.steps, 0)
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda_spec: self.lambda_spec,
            mask_ratio: self.mask_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub patience: usize,
    pub label_smoothing: f64,
    pub freeze_decoder: bool,
    pub val_every: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = TrainSchedule::finetuning(1, 50, 0);
        Self {
            epochs: 50,
            max_steps: None,
            batch_size: s.batch_size,
            peak_lr: s.peak_lr,
            min_lr: s.min_lr,
            warmup_steps: 0,
            weight_decay: s.weight_decay,
            layer_decay: s.layer_decay.unwrap_or(1.0),
            patience: s.patience.unwrap_or(0),
            label_smoothing: s.label_smoothing,
            freeze_decoder: true,
            val_every: 5,
        }
    }
}

impl FinetuneSection {
    /// Schedule for a training set of `n` segments.
    pub fn schedule(&self, n: usize) -> TrainSchedule {
        let per_epoch = n.div_ceil(self.batch_size.max(1));
        let total = self.max_steps.unwrap_or(usize::MAX).min(per_epoch * self.epochs);
        TrainSchedule {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: total,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            layer_decay: (self.layer_decay != 1.0).then_some(self.layer_decay),
            patience: (self.patience > 0).then_some(self.patience),
            label_smoothing: self.label_smoothing,
            ..TrainSchedule::finetuning(1, 1, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub band: (f64, f64),
    pub notch: f64,
    pub rate: f64,
    pub window: f64,
    pub bipolar: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            band: (0.1, 75.0),
            notch: 60.0,
            rate: 256.0,
            window: 5.0,
            bipolar: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub axis: String,
    pub grid: Vec<usize>,
    pub models: Vec<String>,
    pub batch: usize,
    pub patches: usize,
    pub channels: usize,
    pub measure: bool,
    pub memory_budget_mb: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            axis: "channels".into(),
            grid: vec![8, 16, 32, 64, 128],
            models: luna_core::bench::CostModel::ALL
                .iter()
                .map(|m| m.name().to_string())
                .collect(),
            batch: 1,
            patches: 20,
            channels: 20,
            measure: true,
            memory_budget_mb: 256,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            precision: self.precision,
            ..ModelConfig::preset(self.size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("size = \"base\"\n[pretrain]\nsteps = 7\n").unwrap();
        assert_eq!(c.size, ModelSize::Base);
        assert_eq!(c.pretrain.steps, 7);
        assert_eq!(c.pretrain.mask_ratio, 0.5);
        assert_eq!(c.finetune, FinetuneSection::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sizes = \"base\"").is_err());
    }
}
