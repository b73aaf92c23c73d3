use luna_core::bench::{
    affine_fit, luna_flops, measure_luna, memory_model, ratio_report, sweep, Axis, CostModel, Point, Source,
    SweepOptions,
};
use luna_core::temporal::temporal_flops;
use luna_core::unifier::unify_flops;
use luna_core::{ModelConfig, ModelSize};
use proptest::prelude::*;

fn total(m: CostModel, cfg: &ModelConfig, b: usize, s: usize, c: usize) -> u64 {
    m.flops(
        cfg,
        Point {
            batch: b,
            patches: s,
            channels: c,
        },
    )
    .matmul_flops
}

proptest! {
    #[test]
    fn cost_grows_with_every_axis(b in 1usize..4, s in 1usize..40, c in 1usize..80) {
        let cfg = ModelConfig::base();
        for m in CostModel::ALL {
            let here = total(m, &cfg, b, s, c);
            prop_assert!(total(m, &cfg, b, s, c + 1) > here, "{} in channels", m.name());
            prop_assert!(total(m, &cfg, b, s + 1, c) > here, "{} in patches", m.name());
            prop_assert!(total(m, &cfg, b + 1, s, c) > here, "{} in batch", m.name());
            let wider = Point { batch: b, patches: s, channels: c + 1 };
            let here_pt = Point { batch: b, patches: s, channels: c };
            prop_assert!(m.activation_bytes(&cfg, wider) >= m.activation_bytes(&cfg, here_pt));
        }
    }

    #[test]
    fn encoder_is_exactly_affine_in_channels(s in 1usize..40, c in 1usize..200) {
        let cfg = ModelConfig::base();
        let f = |c| total(CostModel::Luna, &cfg, 1, s, c) as i128;
        prop_assert_eq!(f(c + 2) - 2 * f(c + 1) + f(c), 0);
    }

    #[test]
    fn full_attention_is_quadratic_in_channels(s in 1usize..40, c in 1usize..200) {
        let cfg = ModelConfig::base();
        let f = |c| total(CostModel::FullAttention, &cfg, 1, s, c) as i128;
        let d2 = f(c + 2) - 2 * f(c + 1) + f(c);
        // 4·S²·D per layer from the attention term
        let want = 2 * 4 * (s * s * cfg.hidden_size() * cfg.temporal_layers) as i128;
        prop_assert_eq!(d2, want);
    }

    #[test]
    fn batch_scaling(b in 1usize..5, s in 1usize..30, c in 1usize..60) {
        let cfg = ModelConfig::tiny();
        for m in CostModel::ALL {
            if m == CostModel::Luna {
                // the position encoding runs once per montage, not per sample
                let f = |b| total(m, &cfg, b, s, c) as i128;
                prop_assert_eq!(f(b + 2) - 2 * f(b + 1) + f(b), 0);
                prop_assert!(f(2) < 2 * f(1));
            } else {
                prop_assert_eq!(total(m, &cfg, b, s, c), b as u64 * total(m, &cfg, 1, s, c));
            }
        }
    }
}

#[test]
fn analytic_encoder_matches_forward_passes() {
    let cfg = ModelConfig::tiny();
    for (b, s, c) in [(1, 3, 5), (2, 4, 19), (3, 1, 1), (1, 6, 33)] {
        let pt = Point {
            batch: b,
            patches: s,
            channels: c,
        };
        let measured = measure_luna(&cfg, pt, 7).unwrap();
        assert_eq!(measured.matmul_flops, luna_flops(&cfg, pt).matmul_flops, "{pt:?}");
        assert_eq!(measured.stage_prefix("unify."), unify_flops(&cfg, b, s, c).matmul_flops);
        assert_eq!(
            measured.stage_prefix("temporal."),
            temporal_flops(&cfg, b, s).matmul_flops
        );
    }
}

#[test]
fn temporal_cost_ignores_channels() {
    let cfg = ModelConfig::tiny();
    let at = |c| {
        measure_luna(
            &cfg,
            Point {
                batch: 1,
                patches: 4,
                channels: c,
            },
            1,
        )
        .unwrap()
        .stage_prefix("temporal.")
    };
    assert_eq!(at(2), at(40));
}

#[test]
fn published_channel_scaling_is_affine() {
    // LUNA-Base GFLOPs at 6000/7000/8000 channels as reported; rounded to
    // whole GFLOPs, so only an approximate fit is expected
    let (a, b, r2) = affine_fit(&[6000.0, 7000.0, 8000.0], &[18.0, 20.0, 23.0]);
    assert!(r2 > 0.98 && a > 0.0, "slope {a} intercept {b} r2 {r2}");
    let cfg = ModelConfig::preset(ModelSize::Base);
    let ours: Vec<f64> = [6000, 7000, 8000]
        .iter()
        .map(|&c| total(CostModel::Luna, &cfg, 1, 20, c) as f64)
        .collect();
    let (_, _, r2) = affine_fit(&[6000.0, 7000.0, 8000.0], &ours);
    assert!((r2 - 1.0).abs() < 1e-12);
}

#[test]
fn published_patch_scaling_is_superlinear_for_the_encoder_only() {
    // reported GFLOPs at 2000/3000/4000 patches: the encoder's increments
    // grow (temporal attention), the linear-attention baseline's do not
    let luna = [253.0, 478.0, 768.0];
    let biot: [f64; 3] = [1143.0, 1714.0, 2286.0];
    assert!(luna[2] - luna[1] > luna[1] - luna[0]);
    assert!(((biot[2] - biot[1]) - (biot[1] - biot[0])).abs() <= 1.0);
    let cfg = ModelConfig::base();
    let f = |m, s| total(m, &cfg, 1, s, 20) as i128;
    assert!(f(CostModel::Luna, 3000) - f(CostModel::Luna, 2000) < f(CostModel::Luna, 4000) - f(CostModel::Luna, 3000));
    let lin = |s| f(CostModel::LinearAttention, s);
    assert_eq!(lin(4000) - lin(3000), lin(3000) - lin(2000));
}

#[test]
fn full_attention_ratio_grows_with_channels() {
    let cfg = ModelConfig::base();
    let r = |c| {
        ratio_report(
            CostModel::FullAttention,
            CostModel::Luna,
            &cfg,
            Point {
                batch: 1,
                patches: 64,
                channels: c,
            },
        )
    };
    assert!(r(16) < r(64) && r(64) < r(128));
    assert!(r(128) >= 100.0);
    assert_eq!(
        ratio_report(
            CostModel::AltPatches,
            CostModel::AltPatches,
            &cfg,
            Point {
                batch: 2,
                patches: 3,
                channels: 4
            }
        ),
        1.0
    );
}

#[test]
fn memory_estimate_is_the_sum_of_its_stages() {
    let cfg = ModelConfig::base();
    for m in CostModel::ALL {
        let est = memory_model(
            m,
            &cfg,
            Point {
                batch: 2,
                patches: 10,
                channels: 30,
            },
        );
        assert_eq!(
            est.total,
            est.stages.iter().map(|(_, v)| *v).sum::<u64>(),
            "{}",
            m.name()
        );
        assert_eq!(
            est.total,
            m.activation_bytes(
                &cfg,
                Point {
                    batch: 2,
                    patches: 10,
                    channels: 30
                }
            )
        );
    }
}

#[test]
fn sweep_reports_every_point_and_falls_back_when_over_budget() {
    let mut opts = SweepOptions::new(Axis::Channels, vec![4, 8, 16], ModelConfig::tiny());
    opts.fixed = Point {
        batch: 1,
        patches: 4,
        channels: 0,
    };
    opts.memory_budget = CostModel::Luna.activation_bytes(
        &opts.config,
        Point {
            batch: 1,
            patches: 4,
            channels: 8,
        },
    );
    let report = sweep(&opts).unwrap();
    assert_eq!(report.rows.len(), 3 * CostModel::ALL.len());
    let luna: Vec<_> = report.rows.iter().filter(|r| r.model == CostModel::Luna).collect();
    assert_eq!(
        luna.iter().map(|r| r.source).collect::<Vec<_>>(),
        [Source::Measured, Source::Measured, Source::Analytic]
    );
    assert!(luna[2].fallback && !luna[0].fallback);
    assert!(report.to_csv().contains("# fallback:"));
    let csv = report.to_csv();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + report.rows.len());
    assert!(report
        .fits
        .iter()
        .any(|f| f.model == CostModel::FullAttention && (f.attention_exponent - 2.0).abs() < 1e-6));
}
