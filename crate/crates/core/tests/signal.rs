use luna_core::signal::filter::{butter_bandpass, iir_notch};
use luna_core::signal::{
    bandpass, build_bipolar, notch, preprocess, resample, segment, zscore, EegSegment, MontageLayout, PreprocessConfig,
};
use proptest::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;

fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

fn single(x: Vec<f64>) -> EegSegment {
    let m = Arc::new(MontageLayout::from_labels("one", &["Cz"]).unwrap());
    EegSegment::from_channels(vec![x], 256.0, m).unwrap()
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    (mu, (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt())
}

fn spread_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 2..400).prop_filter("needs spread", |x| moments(x).1 > 1e-3)
}

proptest! {
    #[test]
    fn zscore_standardizes(x in spread_vec()) {
        let z = zscore(&single(x));
        let (mu, sd) = moments(z.channel(0));
        prop_assert!(mu.abs() < 1e-9);
        prop_assert!((sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_is_idempotent(x in spread_vec()) {
        let once = zscore(&single(x));
        let twice = zscore(&once);
        for (a, b) in once.channel(0).iter().zip(twice.channel(0)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zscore_ignores_positive_affine_maps(x in spread_vec(), a in 0.01f64..100.0, b in -50f64..50.0) {
        let z = zscore(&single(x.clone()));
        let za = zscore(&single(x.iter().map(|v| a * v + b).collect()));
        for (p, q) in z.channel(0).iter().zip(za.channel(0)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn bandpass_is_linear(a in -3f64..3.0, b in -3f64..3.0, seed in 0u64..1000) {
        let x: Vec<f64> = (0..600).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 97.0 - 0.5).collect();
        let y = tone(11.0, 256.0, 600);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = bandpass(&x, 256.0, 0.5, 40.0).unwrap();
        let fy = bandpass(&y, 256.0, 0.5, 40.0).unwrap();
        let fm = bandpass(&mix, 256.0, 0.5, 40.0).unwrap();
        for i in 0..600 {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }
}

#[test]
fn butterworth_sections_match_closed_form() {
    // bilinear-transformed Butterworth: |H|² = 1/(1 + (t/t_c)^(-2n)) for the
    // high-pass edge and 1/(1 + (t/t_c)^(2n)) for the low-pass edge, t = tan(πf/fs)
    let (lo, hi, rate) = (0.5, 40.0, 256.0);
    let sos = butter_bandpass(lo, hi, rate).unwrap();
    let t = |f: f64| (PI * f / rate).tan();
    for f in [0.1, 0.5, 2.0, 10.0, 40.0, 60.0, 100.0] {
        let got: f64 = sos.iter().map(|s| s.gain_at(f, rate)).product();
        let hp = 1.0 / (1.0 + (t(lo) / t(f)).powi(8));
        let lp = 1.0 / (1.0 + (t(f) / t(hi)).powi(8));
        let want = (hp * lp).sqrt();
        assert!((got - want).abs() < 1e-9 * want.max(1e-3), "{f} Hz: {got} vs {want}");
    }
}

#[test]
fn notch_has_zero_at_line_frequency_and_unit_gain_elsewhere() {
    for f in [50.0, 60.0] {
        let s = iir_notch(f, 256.0).unwrap();
        assert!(s.gain_at(f, 256.0) < 1e-12);
        assert!((s.gain_at(0.0, 256.0) - 1.0).abs() < 1e-12);
        assert!((s.gain_at(f - 10.0, 256.0) - 1.0).abs() < 0.01);
    }
    assert!(notch(&[0.0; 10], 256.0, 55.0).is_err());
}

#[test]
fn filters_reject_bad_edges() {
    assert!(bandpass(&[0.0; 10], 100.0, 0.1, 75.0).is_err());
    assert!(bandpass(&[0.0; 10], 256.0, 10.0, 5.0).is_err());
}

// the Kaiser (β = 5) anti-alias filter ripples by about 1e-3 in the passband
#[test]
fn resampling_keeps_low_tones() {
    let hi = tone(5.0, 512.0, 5120);
    let lo = resample(&hi, 512.0, 256.0).unwrap();
    assert_eq!(lo.len(), 2560);
    let truth = tone(5.0, 256.0, 2560);
    let err = lo[100..2460]
        .iter()
        .zip(&truth[100..2460])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 3e-3, "max interior error {err}");

    let up = resample(&tone(7.0, 250.0, 2500), 250.0, 256.0).unwrap();
    assert_eq!(up.len(), 2560);
    let truth = tone(7.0, 256.0, 2560);
    let err = up[200..2360]
        .iter()
        .zip(&truth[200..2360])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 3e-3, "max interior error {err}");
}

#[test]
fn resampling_suppresses_aliases() {
    // 200 Hz cannot be represented at 256 Hz and must not fold back to 56 Hz
    let y = resample(&tone(200.0, 512.0, 5120), 512.0, 256.0).unwrap();
    let (_, sd) = moments(&y[200..2360]);
    assert!(sd < 0.01, "residual {sd}");
}

const BIPOLAR_LABELS: [&str; 20] = [
    "Fp1-F7", "F7-T3", "T3-T5", "T5-O1", "Fp2-F8", "F8-T4", "T4-T6", "T6-O2", "T3-C3", "C3-CZ", "Fp1-F3", "F3-C3",
    "C3-P3", "P3-O1", "Fp2-F4", "F4-C4", "C4-P4", "P4-O2", "CZ-C4", "C4-T4",
];

#[test]
fn bipolar_derivation_from_impulses() {
    let m = Arc::new(MontageLayout::standard_1020());
    let labels: Vec<String> = m.labels().iter().map(|s| s.to_string()).collect();
    for (e, name) in labels.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..m.len())
            .map(|c| if c == e { vec![0.0, 1.0, 0.0] } else { vec![0.0; 3] })
            .collect();
        let bip = build_bipolar(&EegSegment::from_channels(rows, 256.0, m.clone()).unwrap()).unwrap();
        assert_eq!(bip.montage.labels(), BIPOLAR_LABELS);
        for (r, label) in BIPOLAR_LABELS.iter().enumerate() {
            let (a, b) = label.split_once('-').unwrap();
            let want = if a.eq_ignore_ascii_case(name) {
                1.0
            } else if b.eq_ignore_ascii_case(name) {
                -1.0
            } else {
                0.0
            };
            assert_eq!(bip.channel(r), &[0.0, want, 0.0], "{label} for impulse on {name}");
        }
    }
}

#[test]
fn bipolar_needs_every_electrode() {
    let m = Arc::new(MontageLayout::from_labels("few", &["Fp1", "F7"]).unwrap());
    let seg = EegSegment::from_channels(vec![vec![0.0; 4]; 2], 256.0, m).unwrap();
    assert!(build_bipolar(&seg).is_err());
}

#[test]
fn windows_drop_the_remainder() {
    let seg = single(vec![1.0; 256 * 12 + 17]);
    let w = segment(&seg, 5.0).unwrap();
    assert_eq!(w.len(), 2);
    assert!(w.iter().all(|s| s.samples() == 1280));
    assert!(segment(&single(vec![0.0; 100]), 5.0).unwrap().is_empty());
    assert!(segment(&seg, 1.0 / 3.0).is_err());
}

#[test]
fn full_pipeline_output() {
    let m = Arc::new(MontageLayout::standard_1020());
    let rate = 500.0;
    let n = (rate * 11.0) as usize;
    let rows: Vec<Vec<f64>> = (0..m.len())
        .map(|c| {
            tone(3.0 + c as f64, rate, n)
                .iter()
                .zip(tone(60.0, rate, n))
                .map(|(a, b)| 20.0 * a + 5.0 * b + 100.0)
                .collect()
        })
        .collect();
    let rec = EegSegment::from_channels(rows, rate, m).unwrap();
    let cfg = PreprocessConfig {
        bipolar: true,
        ..PreprocessConfig::default()
    };
    let out = preprocess(&rec, &cfg).unwrap();
    assert_eq!(out.len(), 2);
    for w in &out {
        assert_eq!((w.channels(), w.samples(), w.rate), (20, 1280, 256.0));
        assert!(w.preprocessed);
        for c in 0..20 {
            let (mu, sd) = moments(w.channel(c));
            assert!(mu.abs() < 1e-9 && (sd - 1.0).abs() < 1e-6);
        }
    }
}
