//! Cost models and scaling sweeps: the encoder against full, alternating and
//! linear attention baselines.
//!
//! Baselines are transformer stacks of the encoder's hidden width
//! `D = Q·E`, depth `L` and feed-forward width `M`, counted with the same
//! `2·m·n·k` convention as the instrumented ledger. Their patch embeddings and
//! decoders are not counted.

use crate::config::ModelConfig;
use crate::embedding::Patches;
use crate::error::{config, Result};
use crate::flops::{FlopKind, FlopLedger};
use crate::model::Luna;
use crate::signal::MontageLayout;
use crate::temporal::temporal_flops;
use crate::unifier::unify_flops;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Bytes per activation element in the memory estimates (32-bit floats).
pub const ACTIVATION_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    Luna,
    /// One sequence of `S·C` tokens.
    FullAttention,
    /// Attention along patches: `B·C` sequences of length `S`.
    AltPatches,
    /// Attention along channels: `B·S` sequences of length `C`.
    AltChannels,
    /// Kernelized attention over `S·C` tokens, linear in sequence length.
    LinearAttention,
}

impl CostModel {
    pub const ALL: [CostModel; 5] = [
        CostModel::Luna,
        CostModel::FullAttention,
        CostModel::AltPatches,
        CostModel::AltChannels,
        CostModel::LinearAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostModel::Luna => "luna",
            CostModel::FullAttention => "full_attention",
            CostModel::AltPatches => "alt_patches",
            CostModel::AltChannels => "alt_channels",
            CostModel::LinearAttention => "linear_attention",
        }
    }

    /// Closed-form forward cost at `pt`.
    pub fn flops(self, cfg: &ModelConfig, pt: Point) -> FlopLedger {
        let (b, s, c) = (pt.batch as u64, pt.patches as u64, pt.channels as u64);
        match self {
            CostModel::Luna => luna_flops(cfg, pt),
            CostModel::FullAttention => softmax_stack(cfg, b, s * c),
            CostModel::AltPatches => softmax_stack(cfg, b * c, s),
            CostModel::AltChannels => softmax_stack(cfg, b * s, c),
            CostModel::LinearAttention => {
                let (d, m, n) = (cfg.hidden_size() as u64, cfg.mlp_size as u64, b * s * c);
                let mut l = FlopLedger::new();
                for _ in 0..cfg.temporal_layers {
                    l.charge("linear.attention", FlopKind::Dense, 8 * n * d * d);
                    // φ(K)ᵀV then φ(Q)·(φ(K)ᵀV), per head
                    l.charge(
                        "linear.attention",
                        FlopKind::Attention,
                        4 * n * d * d / cfg.num_heads as u64,
                    );
                    l.charge("linear.ffn", FlopKind::Dense, 4 * n * d * m);
                }
                l
            }
        }
    }

    /// Peak live activation estimate at `pt`.
    pub fn activation_bytes(self, cfg: &ModelConfig, pt: Point) -> u64 {
        memory_model(self, cfg, pt).total
    }
}

impl std::str::FromStr for CostModel {
    type Err = crate::LunaError;
    fn from_str(s: &str) -> Result<Self> {
        CostModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::LunaError::Config(format!("unknown cost model '{s}'")))
    }
}

/// Batch size, patches per channel and channel count of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Point {
    pub batch: usize,
    pub patches: usize,
    pub channels: usize,
}

/// `L` softmax-attention layers over `seqs` sequences of `len` tokens.
fn softmax_stack(cfg: &ModelConfig, seqs: u64, len: u64) -> FlopLedger {
    let (d, m) = (cfg.hidden_size() as u64, cfg.mlp_size as u64);
    let mut l = FlopLedger::new();
    for _ in 0..cfg.temporal_layers {
        l.charge("stack.attention", FlopKind::Dense, 8 * seqs * len * d * d);
        l.charge("stack.attention", FlopKind::Attention, 4 * seqs * len * len * d);
        l.charge("stack.ffn", FlopKind::Dense, 4 * seqs * len * d * m);
    }
    l
}

/// Patch embedding cost: three convolutions, the temporal projection, the
/// spectral MLP on every token and the position MLP on every channel.
pub fn embed_flops(cfg: &ModelConfig, pt: Point) -> FlopLedger {
    let n = pt.batch * pt.patches * pt.channels;
    let e = cfg.embed_dim;
    let lengths = cfg.conv_lengths().expect("validated config");
    let cin = cfg.conv_in_channels();
    let mut l = FlopLedger::new();
    for i in 0..3 {
        l.charge_matmul(
            "embed.temporal",
            FlopKind::Dense,
            1,
            n * lengths[i],
            cin[i] * cfg.conv_kernels[i],
            cfg.conv_channels[i],
        );
    }
    l.charge_matmul(
        "embed.temporal",
        FlopKind::Dense,
        1,
        n,
        cfg.conv_channels[2] * lengths[2],
        e,
    );
    l.charge_matmul("embed.frequency", FlopKind::Dense, 1, n, cfg.spectrum_features(), e);
    l.charge_matmul("embed.frequency", FlopKind::Dense, 1, n, e, e);
    l.charge_matmul(
        "embed.position",
        FlopKind::Dense,
        1,
        pt.channels,
        cfg.position_features(),
        e,
    );
    l.charge_matmul("embed.position", FlopKind::Dense, 1, pt.channels, e, e);
    l
}

/// Encoder cost without heads: embedding, unification and temporal layers.
pub fn luna_flops(cfg: &ModelConfig, pt: Point) -> FlopLedger {
    let mut l = embed_flops(cfg, pt);
    l.merge(&unify_flops(cfg, pt.batch, pt.patches, pt.channels));
    l.merge(&temporal_flops(cfg, pt.batch, pt.patches));
    l
}

/// Ledger of a real encoder forward pass on random input at `pt`.
pub fn measure_luna(cfg: &ModelConfig, pt: Point, seed: u64) -> Result<FlopLedger> {
    let model = Luna::new(cfg.clone(), seed)?;
    let montage = MontageLayout::spherical(pt.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = pt.batch * pt.patches * pt.channels * cfg.patch_size;
    let patches = Patches {
        batch: pt.batch,
        patches: pt.patches,
        channels: pt.channels,
        patch_size: cfg.patch_size,
        data: (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
    };
    let mut g = model.graph();
    let p = model.store.bind(&mut g);
    model.encode(&mut g, &p, &patches, &montage, None, None)?;
    Ok(g.ledger().clone())
}

/// Per-stage peak live activations of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub stages: Vec<(String, u64)>,
    pub total: u64,
}

fn estimate(stages: Vec<(&str, u64)>) -> MemoryEstimate {
    let stages: Vec<(String, u64)> = stages
        .into_iter()
        .map(|(k, v)| (k.to_string(), v * ACTIVATION_BYTES))
        .collect();
    let total = stages.iter().map(|(_, v)| v).sum();
    MemoryEstimate { stages, total }
}

/// Live tensors of one softmax layer over `seqs` sequences of `len`:
/// input, Q/K/V, the score matrix per head, or the FFN hidden layer.
fn softmax_layer_elems(cfg: &ModelConfig, seqs: u64, len: u64) -> u64 {
    let (d, m, h) = (cfg.hidden_size() as u64, cfg.mlp_size as u64, cfg.num_heads as u64);
    let x = seqs * len * d;
    x + (3 * x + seqs * h * len * len).max(seqs * len * m)
}

/// Sum over stages of the largest simultaneously live intermediates.
pub fn memory_model(model: CostModel, cfg: &ModelConfig, pt: Point) -> MemoryEstimate {
    let (b, s, c) = (pt.batch as u64, pt.patches as u64, pt.channels as u64);
    let (q, e, h, d) = (
        cfg.num_queries as u64,
        cfg.embed_dim as u64,
        cfg.num_heads as u64,
        cfg.hidden_size() as u64,
    );
    match model {
        CostModel::Luna => {
            let tokens = b * s * c;
            let lengths = cfg.conv_lengths().expect("validated config");
            let conv = (0..3)
                .map(|i| tokens * (cfg.conv_channels[i] * lengths[i]) as u64)
                .max()
                .unwrap_or(0);
            let n = b * s;
            // channel tokens, their keys and values, queries and head-wise scores
            let cross = n * c * e * 3 + n * q * e + n * h * q * c;
            let ffn = n * q * e + n * q * (cfg.unifier_ffn as u64);
            let unify = cross.max(ffn);
            estimate(vec![
                ("embed", tokens * e + conv),
                ("unify", unify),
                ("temporal", softmax_layer_elems(cfg, b, s)),
            ])
        }
        CostModel::FullAttention => estimate(vec![("stack", softmax_layer_elems(cfg, b, s * c))]),
        CostModel::AltPatches => estimate(vec![("stack", softmax_layer_elems(cfg, b * c, s))]),
        CostModel::AltChannels => estimate(vec![("stack", softmax_layer_elems(cfg, b * s, c))]),
        CostModel::LinearAttention => {
            let n = b * s * c;
            let x = n * d;
            let state = b * h * (d / h) * (d / h);
            estimate(vec![("stack", x + (3 * x + state).max(n * cfg.mlp_size as u64))])
        }
    }
}

/// `flops(a) / flops(b)` at `pt`.
pub fn ratio_report(a: CostModel, b: CostModel, cfg: &ModelConfig, pt: Point) -> f64 {
    a.flops(cfg, pt).matmul_flops as f64 / b.flops(cfg, pt).matmul_flops as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Channels,
    Patches,
}

impl std::str::FromStr for Axis {
    type Err = crate::LunaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channels" => Ok(Axis::Channels),
            "patches" => Ok(Axis::Patches),
            other => config(format!("unknown sweep axis '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Measured,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub model: CostModel,
    pub axis_value: usize,
    pub flops: u64,
    pub attention_flops: u64,
    pub activation_bytes: u64,
    pub source: Source,
    /// Measurement was requested but the point exceeded the memory budget.
    pub fallback: bool,
    /// Stage breakdown when measured.
    #[serde(skip)]
    pub ledger: Option<FlopLedger>,
}

/// Least-squares fits of one model's cost along the sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub model: CostModel,
    /// Slope of `log flops` against `log axis`.
    pub exponent: f64,
    /// The same slope for attention-score flops alone (0 when there are none).
    pub attention_exponent: f64,
    /// R² of `flops ≈ a + b·axis`.
    pub affine_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub grid: Vec<usize>,
    /// Values of the non-swept dimensions (the swept one is ignored).
    pub fixed: Point,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<ScalingFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub axis: Axis,
    pub grid: Vec<usize>,
    pub models: Vec<CostModel>,
    pub config: ModelConfig,
    pub fixed: Point,
    /// Run real forward passes for the encoder where they fit the budget.
    pub measure: bool,
    /// Largest activation estimate (bytes) that is run for real.
    pub memory_budget: u64,
    pub seed: u64,
}

impl SweepOptions {
    pub fn new(axis: Axis, grid: Vec<usize>, config: ModelConfig) -> Self {
        Self {
            axis,
            grid,
            models: CostModel::ALL.to_vec(),
            config,
            fixed: Point {
                batch: 1,
                patches: 20,
                channels: 20,
            },
            measure: true,
            memory_budget: 256 << 20,
            seed: 0,
        }
    }

    fn point(&self, v: usize) -> Point {
        match self.axis {
            Axis::Channels => Point {
                channels: v,
                ..self.fixed
            },
            Axis::Patches => Point {
                patches: v,
                ..self.fixed
            },
        }
    }
}

/// Evaluate every model at every grid point. Encoder points within the
/// memory budget are measured by real forward passes, in parallel.
pub fn sweep(opts: &SweepOptions) -> Result<SweepReport> {
    if opts.grid.is_empty() || opts.grid.windows(2).any(|w| w[0] >= w[1]) || opts.grid[0] == 0 {
        return config("sweep grid must be positive and strictly increasing");
    }
    if opts.models.is_empty() {
        return config("sweep needs at least one model");
    }
    opts.config.validate()?;
    let measured: Vec<Option<Result<FlopLedger>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = opts
            .grid
            .iter()
            .map(|&v| {
                let pt = opts.point(v);
                let run = opts.measure
                    && opts.models.contains(&CostModel::Luna)
                    && CostModel::Luna.activation_bytes(&opts.config, pt) <= opts.memory_budget;
                run.then(|| scope.spawn(move || measure_luna(&opts.config, pt, opts.seed)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.map(|h| h.join().expect("sweep worker panicked")))
            .collect()
    });
    let measured: Vec<Option<FlopLedger>> = measured.into_iter().map(Option::transpose).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &model in &opts.models {
        for (i, &v) in opts.grid.iter().enumerate() {
            let pt = opts.point(v);
            let bytes = model.activation_bytes(&opts.config, pt);
            let (ledger, source) = match (&measured[i], model) {
                (Some(m), CostModel::Luna) => (m.clone(), Source::Measured),
                _ => (model.flops(&opts.config, pt), Source::Analytic),
            };
            rows.push(SweepRow {
                model,
                axis_value: v,
                flops: ledger.matmul_flops,
                attention_flops: ledger.attention_flops,
                activation_bytes: bytes,
                source,
                fallback: model == CostModel::Luna && opts.measure && source == Source::Analytic,
                ledger: (source == Source::Measured).then_some(ledger),
            });
        }
    }
    let x: Vec<f64> = opts.grid.iter().map(|&v| v as f64).collect();
    let fits = opts
        .models
        .iter()
        .map(|&model| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.model == model).collect();
            let y: Vec<f64> = sel.iter().map(|r| r.flops as f64).collect();
            let ya: Vec<f64> = sel.iter().map(|r| r.attention_flops as f64).collect();
            ScalingFit {
                model,
                exponent: power_fit(&x, &y).0,
                attention_exponent: if ya.iter().all(|&v| v > 0.0) {
                    power_fit(&x, &ya).0
                } else {
                    0.0
                },
                affine_r2: affine_fit(&x, &y).2,
            }
        })
        .collect();
    Ok(SweepReport {
        axis: opts.axis,
        grid: opts.grid.clone(),
        fixed: opts.fixed,
        rows,
        fits,
    })
}

/// Ordinary least squares `y ≈ a + b·x`; returns `(a, b, R²)`.
pub fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (a, b, r2)
}

/// Power law `y ≈ k·x^p` fitted in log space; returns `(p, R²)`.
pub fn power_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (_, p, r2) = affine_fit(&lx, &ly);
    (p, r2)
}

impl SweepReport {
    /// `model,axis_value,flops,activation_bytes,source` with `#` comment lines
    /// describing what is counted.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let fixed = match self.axis {
            Axis::Channels => format!("batch={} patches={}", self.fixed.batch, self.fixed.patches),
            Axis::Patches => format!("batch={} channels={}", self.fixed.batch, self.fixed.channels),
        };
        out.push_str(&format!(
            "# axis={} {fixed}\n",
            serde_json::to_string(&self.axis).unwrap_or_default().trim_matches('"')
        ));
        out.push_str(
            "# flops count matmul multiply-adds (2mnk); decoder and head costs are excluded for every model\n",
        );
        out.push_str("# baseline patch-embedding costs are excluded; luna includes its embedding\n");
        for r in self.rows.iter().filter(|r| r.fallback) {
            out.push_str(&format!(
                "# fallback: {} at {} exceeded the memory budget\n",
                r.model.name(),
                r.axis_value
            ));
        }
        out.push_str("model,axis_value,flops,activation_bytes,source\n");
        for r in &self.rows {
            let src = match r.source {
                Source::Measured => "measured",
                Source::Analytic => "analytic",
            };
            out.push_str(&format!(
                "{},{},{},{},{src}\n",
                r.model.name(),
                r.axis_value,
                r.flops,
                r.activation_bytes
            ));
        }
        out
    }

    /// A gnuplot script plotting FLOPs and memory of every model from `csv`.
    pub fn gnuplot(&self, csv: &str) -> String {
        let axis = match self.axis {
            Axis::Channels => "channels",
            Axis::Patches => "patches",
        };
        let series = |col: usize| {
            self.fits
                .iter()
                .map(|f| {
                    format!(
                        "'{csv}' using 2:(stringcolumn(1) eq '{m}' ? ${col} : 1/0) with linespoints title '{m}'",
                        m = f.model.name()
                    )
                })
                .collect::<Vec<_>>()
                .join(", \\\n     ")
        };
        format!(
            "set datafile separator ','\nset key left top\nset logscale xy\nset xlabel '{axis}'\n\
             set terminal pngcairo size 1200,500\nset output '{csv}.png'\nset multiplot layout 1,2\n\
             set ylabel 'FLOPs'\nplot {}\nset ylabel 'activation bytes'\nplot {}\nunset multiplot\n",
            series(3),
            series(4)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: usize) -> Point {
        Point {
            batch: 2,
            patches: 20,
            channels: c,
        }
    }

    #[test]
    fn self_ratio_is_one() {
        let cfg = ModelConfig::base();
        assert_eq!(ratio_report(CostModel::Luna, CostModel::Luna, &cfg, pt(22)), 1.0);
    }

    #[test]
    fn full_attention_score_term_quadruples() {
        let cfg = ModelConfig::tiny();
        let a = CostModel::FullAttention.flops(&cfg, pt(16)).attention_flops;
        let b = CostModel::FullAttention.flops(&cfg, pt(32)).attention_flops;
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn fits_recover_exact_laws() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        let (p, r2) = power_fit(&x, &y);
        assert!((p - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (a, b, r2) = affine_fit(&x, &[5.0, 7.0, 11.0, 19.0]);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsorted_grid() {
        let o = SweepOptions::new(Axis::Channels, vec![8, 8], ModelConfig::tiny());
        assert!(sweep(&o).is_err());
    }
}
