use luna_core::metrics::{
    accuracy, auc_pr_binary, auroc_binary, balanced_accuracy, cohen_kappa, confusion_matrix, evaluate, weighted_f1,
};
use luna_core::signal::MontageLayout;
use luna_core::synth::{synth_eeg, SynthConfig, BANDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;

const TRUTH: [usize; 6] = [0, 0, 1, 1, 2, 2];
const PRED: [usize; 6] = [0, 1, 1, 1, 2, 0];

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn multiclass_scores_on_a_toy_set() {
    assert_eq!(
        confusion_matrix(&TRUTH, &PRED, 3),
        vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]
    );
    close(accuracy(&TRUTH, &PRED), 4.0 / 6.0);
    close(balanced_accuracy(&TRUTH, &PRED, 3), (0.5 + 1.0 + 0.5) / 3.0);
    // observed 2/3, chance (2·2 + 2·3 + 2·1)/36 = 1/3
    close(cohen_kappa(&TRUTH, &PRED, 3), 0.5);
    close(weighted_f1(&TRUTH, &PRED, 3), (0.5 + 0.8 + 2.0 / 3.0) / 3.0);
}

#[test]
fn binary_curves_on_a_toy_set() {
    let pos = [true, false, true, false, true, false];
    let scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
    close(auroc_binary(&pos, &scores).unwrap(), 6.0 / 9.0);
    close(
        auc_pr_binary(&pos, &scores).unwrap(),
        1.0 / 3.0 + 7.0 / 36.0 + 11.0 / 60.0,
    );
    // one positive tied with one negative counts half a pair
    close(auroc_binary(&[true, false], &[0.5, 0.5]).unwrap(), 0.5);
    assert!(auroc_binary(&[true, true], &[0.1, 0.2]).is_none());
    assert!(auc_pr_binary(&[false, false], &[0.1, 0.2]).is_none());
}

#[test]
fn random_scores_give_chance_auroc() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let a = auroc_binary(&pos, &scores).unwrap();
    assert!((a - 0.5).abs() < 0.05, "{a}");
}

#[test]
fn perfect_probabilities() {
    let probs: Vec<Vec<f64>> = TRUTH
        .iter()
        .map(|&t| (0..3).map(|k| if k == t { 0.9 } else { 0.05 }).collect())
        .collect();
    let m = evaluate(&TRUTH, &probs).unwrap();
    for v in [
        m.accuracy,
        m.balanced_accuracy,
        m.auroc,
        m.auc_pr,
        m.cohen_kappa,
        m.weighted_f1,
    ] {
        close(v, 1.0);
    }
    assert!(evaluate(&TRUTH, &probs[..3]).is_err());
}

/// Power of `x` in `[lo, hi)` Hz by a direct DFT.
fn band_power(x: &[f64], rate: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    (1..n / 2)
        .filter(|&k| {
            let f = k as f64 * rate / n as f64;
            f >= lo && f < hi
        })
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = 2.0 * PI * (k * t) as f64 / n as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            re * re + im * im
        })
        .sum()
}

#[test]
fn synthetic_power_sits_in_the_bands() {
    let cfg = SynthConfig {
        seconds: 2.0,
        n_classes: Some(3),
        ..SynthConfig::default()
    };
    let data = synth_eeg(Arc::new(MontageLayout::double_banana()), 6, 5, &cfg).unwrap();
    for seg in &data.segments {
        let x = seg.channel(3);
        let total = band_power(x, cfg.rate, 0.0, 128.0);
        let bands: Vec<f64> = BANDS
            .iter()
            .map(|&(lo, hi)| band_power(x, cfg.rate, lo, hi + 0.5))
            .collect();
        assert!(bands.iter().sum::<f64>() > 0.9 * total);
        let loudest = (0..3).max_by(|&a, &b| bands[a].total_cmp(&bands[b])).unwrap();
        assert_eq!(loudest as u32, seg.label.unwrap());
    }
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn neighbours_correlate_more_than_distant_pairs() {
    let m = Arc::new(MontageLayout::seed62());
    let pos = m.positions();
    let data = synth_eeg(m.clone(), 20, 8, &SynthConfig::default()).unwrap();
    let dist = |i: usize, j: usize| (0..3).map(|k| (pos[i][k] - pos[j][k]).powi(2)).sum::<f64>().sqrt();
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for seg in &data.segments {
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let d = dist(i, j);
                if d < 0.3 {
                    near.push(corr(seg.channel(i), seg.channel(j)).abs());
                } else if d > 1.5 {
                    far.push(corr(seg.channel(i), seg.channel(j)).abs());
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!near.is_empty() && !far.is_empty());
    assert!(
        mean(&near) > mean(&far) + 0.2,
        "near {} far {}",
        mean(&near),
        mean(&far)
    );
}

#[test]
fn synthetic_config_validation() {
    let m = Arc::new(MontageLayout::standard_1020());
    let bad = [
        SynthConfig {
            n_classes: Some(4),
            ..SynthConfig::default()
        },
        SynthConfig {
            sources: 0,
            ..SynthConfig::default()
        },
        SynthConfig {
            seconds: 0.001,
            ..SynthConfig::default()
        },
    ];
    for cfg in bad {
        assert!(synth_eeg(m.clone(), 1, 0, &cfg).is_err());
    }
}
