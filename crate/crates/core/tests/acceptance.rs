//! End-to-end acceptance checks. Runs sequentially so the reported runtimes
//! are not inflated by other tests; prints one PASS/FAIL line per check and
//! exits non-zero if any fails.
//!
//! `cargo test -p luna-core --test acceptance -- <filter>` runs the checks
//! whose name contains `<filter>`.

use luna_core::bench::{ratio_report, sweep, Axis, CostModel, Point, SweepOptions};
use luna_core::embedding::{sample_mask, Patches, SpectrumPlan};
use luna_core::io::{checkpoint_bytes, parse_checkpoint};
use luna_core::losses::{smooth_l1, specialization_loss};
use luna_core::signal::{bandpass, build_bipolar, notch, resample, zscore, EegSegment, MontageLayout, BIPOLAR_PAIRS};
use luna_core::synth::{synth_eeg, SynthConfig};
use luna_core::temporal::temporal_flops;
use luna_core::train::{finetune, predict_proba, pretrain, pretrain_objective, FinetuneOptions, PretrainOptions};
use luna_core::unifier::unify_flops;
use luna_core::{LossConfig, Luna, ModelConfig, Tensor, TrainSchedule};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_segment(montage: &Arc<MontageLayout>, samples: usize, rng: &mut ChaCha8Rng) -> EegSegment {
    let c = montage.len();
    let data = (0..c * samples).map(|_| StandardNormal.sample(rng)).collect();
    EegSegment::new(data, c, 256.0, montage.clone()).unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Luna::new(ModelConfig::tiny(), 3).unwrap();
    model.attach_classifier(3).unwrap();
    let full = MontageLayout::seed62();
    let mut worst = 0.0f64;
    for c in [8, 22, 62] {
        let m = Arc::new(full.truncated(c, format!("seed62_{c}")).unwrap());
        let segs: Vec<EegSegment> = (0..2).map(|_| random_segment(&m, 160, &mut rng)).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<EegSegment> = segs.iter().map(|s| s.permuted(&perm).unwrap()).collect();
        let a = model.infer(&segs.iter().collect::<Vec<_>>()).unwrap();
        let b = model.infer(&permuted.iter().collect::<Vec<_>>()).unwrap();
        worst = worst
            .max(max_abs(&a.unified, &b.unified))
            .max(max_abs(a.logits.as_ref().unwrap(), b.logits.as_ref().unwrap()));
    }
    outcome(worst <= 1e-10, format!("max-abs difference {worst:.2e} (limit 1e-10)"))
}

fn topology_agnosticism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Luna::new(ModelConfig::tiny(), 4).unwrap();
    let model = parse_checkpoint(&checkpoint_bytes(&model).unwrap()).unwrap();
    let seed62 = MontageLayout::seed62();
    let layouts = [
        MontageLayout::from_labels("three", &["Fp1", "Cz", "O2"]).unwrap(),
        MontageLayout::double_banana(),
        seed62.truncated(22, "seed62_22").unwrap(),
        seed62.truncated(29, "seed62_29").unwrap(),
        seed62,
    ];
    let want = [2, 4, model.config.hidden_size()];
    let mut shapes = Vec::new();
    let mut ok = true;
    for m in layouts {
        let m = Arc::new(m);
        let segs: Vec<EegSegment> = (0..2).map(|_| random_segment(&m, 160, &mut rng)).collect();
        let inf = model.infer(&segs.iter().collect::<Vec<_>>()).unwrap();
        ok &= inf.e_out.shape() == want;
        shapes.push(format!("C={}→{:?}", m.len(), inf.e_out.shape()));
    }
    outcome(ok, shapes.join(", "))
}

/// Central differences on sampled entries of every parameter tensor.
fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut model = Luna::new(cfg.clone(), 5).unwrap();
    let montage = Arc::new(MontageLayout::from_labels("five", &["Fp1", "F3", "Cz", "P4", "O2"]).unwrap());
    model.extend_bank(&montage).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let segs: Vec<EegSegment> = (0..2)
        .map(|_| random_segment(&montage, 3 * cfg.patch_size, &mut rng))
        .collect();
    let patches = Patches::from_segments(&segs.iter().collect::<Vec<_>>(), cfg.patch_size).unwrap();
    let mask = sample_mask(2, 3, 5, 0.5, &mut rng).unwrap();
    let loss = LossConfig::default();
    let eval = |m: &Luna| -> f64 {
        let mut g = m.graph();
        let p = m.store.bind(&mut g);
        let o = pretrain_objective(m, &mut g, &p, &patches, &montage, mask.clone(), &loss, None).unwrap();
        g.value(o.total).item().unwrap()
    };
    let analytic = {
        let mut g = model.graph();
        let p = model.store.bind(&mut g);
        let o = pretrain_objective(&model, &mut g, &p, &patches, &montage, mask.clone(), &loss, None).unwrap();
        let grads = g.backward(o.total).unwrap();
        p.collect_grads(&grads, &model.store)
    };
    let h = 1e-5;
    let ids: Vec<_> = model.store.ids().collect();
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0);
    for (i, id) in ids.into_iter().enumerate() {
        let n = model.store.tensor(id).len();
        let picks: Vec<usize> = if n <= 25 {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, 25).into_vec()
        };
        for j in picks {
            let orig = model.store.tensor(id).data()[j];
            model.store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let up = eval(&model);
            model.store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let down = eval(&model);
            model.store.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{j}]", model.store.name(id));
            }
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!(
            "{checked} entries over {} tensors, worst relative error {worst:.2e} at {worst_name} (limit 1e-4)",
            analytic.len()
        ),
    )
}

fn loss_formulas() -> Outcome {
    let beta = 0.7;
    let below = smooth_l1(beta - 1e-13, 0.0, beta);
    let at = smooth_l1(beta, 0.0, beta);
    let above = smooth_l1(beta + 1e-13, 0.0, beta);
    let jump = (at - below).abs().max((above - at).abs());
    let mut ortho = vec![0.0; 3 * 6];
    for (q, cols) in [[0usize, 1], [2, 3], [4, 5]].iter().enumerate() {
        for &c in cols {
            ortho[q * 6 + c] = 0.5;
        }
    }
    let ortho = specialization_loss(&Tensor::new(vec![1, 3, 6], ortho).unwrap(), 0.8).unwrap();
    let uniform = specialization_loss(&Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap(), 0.8).unwrap();
    outcome(
        jump <= 1e-12 && ortho == 0.0 && (uniform - 0.2).abs() <= 1e-12,
        format!("smooth-L1 jump at β {jump:.1e}, orthogonal affinity {ortho}, uniform Q=2 rows {uniform}"),
    )
}

/// Masked-patch MSE of the model and of predicting each masked patch by the
/// mean of its channel's visible samples.
fn masked_mse(model: &Luna, segs: &[EegSegment], seed: u64) -> (f64, f64) {
    let montage = segs[0].montage.clone();
    let refs: Vec<&EegSegment> = segs.iter().collect();
    let patches = Patches::from_segments(&refs, model.config.patch_size).unwrap();
    let (b, s, c, p) = (patches.batch, patches.patches, patches.channels, patches.patch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = sample_mask(b, s, c, 0.5, &mut rng).unwrap();
    let mut g = model.graph();
    let bound = model.store.bind(&mut g);
    let obj = pretrain_objective(
        model,
        &mut g,
        &bound,
        &patches,
        &montage,
        mask,
        &LossConfig::default(),
        None,
    )
    .unwrap();
    let recon = g.value(obj.recon).data();
    let target = patches.channel_major();
    let (mut err_model, mut err_mean, mut n) = (0.0, 0.0, 0usize);
    for bc in 0..b * c {
        let rows = &obj.mask[bc * s..(bc + 1) * s];
        let visible: Vec<f64> = (0..s)
            .filter(|&k| !rows[k])
            .flat_map(|k| target[(bc * s + k) * p..(bc * s + k + 1) * p].iter().copied())
            .collect();
        let mean = if visible.is_empty() {
            0.0
        } else {
            visible.iter().sum::<f64>() / visible.len() as f64
        };
        for k in (0..s).filter(|&k| rows[k]) {
            for t in 0..p {
                let i = (bc * s + k) * p + t;
                err_model += (recon[i] - target[i]).powi(2);
                err_mean += (mean - target[i]).powi(2);
                n += 1;
            }
        }
    }
    (err_model / n as f64, err_mean / n as f64)
}

fn desk_scale_learning() -> Outcome {
    let montage = Arc::new(MontageLayout::double_banana());
    let data = synth_eeg(montage.clone(), 2000, 21, &SynthConfig::default()).unwrap();
    let held_out = synth_eeg(montage, 64, 22, &SynthConfig::default()).unwrap();
    let mut model = Luna::new(ModelConfig::tiny(), 6).unwrap();
    let steps = 1000;
    let schedule = TrainSchedule {
        peak_lr: 3e-3,
        min_lr: 3e-5,
        warmup_steps: 20,
        total_steps: steps,
        batch_size: 4,
        ..TrainSchedule::pretraining(1, steps, 0)
    };
    let loss = LossConfig::default();
    let opts = PretrainOptions {
        schedule,
        loss,
        steps,
        seed: 7,
    };
    let trace = pretrain(&mut model, &data, &opts).unwrap();
    let first = trace[0].total(loss.alpha);
    let window = &trace[190..200];
    let at_200 = window.iter().map(|r| r.total(loss.alpha)).sum::<f64>() / window.len() as f64;
    let (mse, baseline) = masked_mse(&model, &held_out.segments, 99);
    outcome(
        at_200 < 0.5 * first && mse < baseline,
        format!(
            "total loss step 1 {first:.4} → steps 191-200 mean {at_200:.4} (ratio {:.3}, need < 0.5); \
             held-out masked MSE after {steps} steps {mse:.4} vs channel-mean {baseline:.4}",
            at_200 / first
        ),
    )
}

fn desk_scale_finetuning() -> Outcome {
    let montage = Arc::new(MontageLayout::double_banana());
    let cfg = SynthConfig {
        n_classes: Some(3),
        ..SynthConfig::default()
    };
    let train = synth_eeg(montage, 96, 31, &cfg).unwrap();
    let mut model = Luna::new(ModelConfig::tiny(), 8).unwrap();
    let schedule = TrainSchedule {
        peak_lr: 1e-3,
        min_lr: 1e-5,
        warmup_steps: 10,
        total_steps: 500,
        batch_size: 8,
        layer_decay: None,
        patience: None,
        ..TrainSchedule::finetuning(1, 1, 0)
    };
    let opts = FinetuneOptions {
        schedule,
        epochs: 1000,
        max_steps: Some(500),
        seed: 9,
        freeze_decoder: true,
    };
    let report = finetune(&mut model, &train, None, 3, &opts).unwrap();
    let probs = predict_proba(&model, &train, 32).unwrap();
    let labels: Vec<usize> = train.segments.iter().map(|s| s.label.unwrap() as usize).collect();
    let acc = luna_core::metrics::accuracy(
        &labels,
        &probs
            .iter()
            .map(|r| (0..3).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
            .collect::<Vec<_>>(),
    );
    outcome(
        acc >= 0.95 && report.steps <= 500,
        format!(
            "train accuracy {acc:.3} after {} steps (need ≥ 0.95 within 500)",
            report.steps
        ),
    )
}

fn flops_scaling() -> Outcome {
    let mut opts = SweepOptions::new(Axis::Channels, vec![8, 16, 32, 64, 128], ModelConfig::base());
    opts.models = vec![CostModel::Luna];
    opts.fixed = Point {
        batch: 1,
        patches: 20,
        channels: 0,
    };
    let report = sweep(&opts).unwrap();
    let ledgers: Vec<_> = report
        .rows
        .iter()
        .map(|r| r.ledger.clone().expect("measured"))
        .collect();
    let x: Vec<f64> = report.grid.iter().map(|&c| c as f64).collect();
    let unify: Vec<f64> = ledgers.iter().map(|l| l.stage_prefix("unify.") as f64).collect();
    let (_, _, r2) = luna_core::bench::affine_fit(&x, &unify);
    let temporal: Vec<u64> = ledgers.iter().map(|l| l.stage_prefix("temporal.")).collect();
    let same = temporal.windows(2).all(|w| w[0] == w[1]) && temporal[0] > 0;
    let ratio = ratio_report(
        CostModel::FullAttention,
        CostModel::Luna,
        &ModelConfig::base(),
        Point {
            batch: 1,
            patches: 64,
            channels: 128,
        },
    );
    outcome(
        r2 >= 0.999 && same && ratio >= 100.0,
        format!(
            "unifier affine R² {r2:.6}, temporal ledger {} across C, full/encoder ratio at C=128 S=64 {ratio:.0}×",
            if same { "identical" } else { "varies" }
        ),
    )
}

fn analytic_vs_measured() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut matched = 0;
    let mut configs = Vec::new();
    while configs.len() < 5 {
        let e = [8, 12, 16][rng.random_range(0..3)];
        let cfg = ModelConfig {
            num_queries: rng.random_range(1..=4),
            embed_dim: e,
            num_heads: [1, 2][rng.random_range(0..2)],
            unifier_layers: rng.random_range(0..=2),
            unifier_ffn: rng.random_range(8..=48),
            temporal_layers: rng.random_range(1..=3),
            mlp_size: rng.random_range(8..=64),
            ..ModelConfig::tiny()
        };
        if cfg.validate().is_ok() {
            configs.push(cfg);
        }
    }
    let mut lines = Vec::new();
    for cfg in configs {
        let pt = Point {
            batch: rng.random_range(1..=3),
            patches: rng.random_range(1..=6),
            channels: rng.random_range(1..=12),
        };
        let measured = luna_core::bench::measure_luna(&cfg, pt, 1).unwrap();
        let u = unify_flops(&cfg, pt.batch, pt.patches, pt.channels);
        let t = temporal_flops(&cfg, pt.batch, pt.patches);
        let unify_ok =
            u.stages.iter().all(|(k, v)| measured.stage(k) == *v) && measured.stage_prefix("unify.") == u.matmul_flops;
        let temporal_ok = t.stages.iter().all(|(k, v)| measured.stage(k) == *v)
            && measured.stage_prefix("temporal.") == t.matmul_flops;
        matched += (unify_ok && temporal_ok) as usize;
        lines.push(format!(
            "Q{}E{}H{}Lu{}Lt{} B{}S{}C{}",
            cfg.num_queries,
            cfg.embed_dim,
            cfg.num_heads,
            cfg.unifier_layers,
            cfg.temporal_layers,
            pt.batch,
            pt.patches,
            pt.channels
        ));
    }
    outcome(
        matched == 5,
        format!("{matched}/5 exact matches ({})", lines.join("; ")),
    )
}

fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

/// Amplitude of the `freq` component over the middle half of `x`. The slow
/// start-up transient of the 0.1 Hz edge is not part of the tone.
fn tone_amplitude(x: &[f64], freq: f64, rate: f64) -> f64 {
    let (a, b) = (x.len() / 4, 3 * x.len() / 4);
    let (mut c, mut s) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate().take(b).skip(a) {
        let w = 2.0 * PI * freq * i as f64 / rate;
        c += v * w.cos();
        s += v * w.sin();
    }
    2.0 * c.hypot(s) / (b - a) as f64
}

fn preprocessing() -> Outcome {
    let rate = 256.0;
    let n = 256 * 20;
    let gain = |f: f64, filt: &dyn Fn(&[f64]) -> Vec<f64>| tone_amplitude(&filt(&tone(f, rate, n)), f, rate);
    let bp = |x: &[f64]| bandpass(x, rate, 0.1, 75.0).unwrap();
    let n50 = |x: &[f64]| notch(x, rate, 50.0).unwrap();
    let n60 = |x: &[f64]| notch(x, rate, 60.0).unwrap();
    let (pass_bp, stop_bp) = (gain(10.0, &bp), gain(100.0, &bp));
    let (pass_n, stop_n50, stop_n60) = (gain(10.0, &n50), gain(50.0, &n50), gain(60.0, &n60));
    let db = |r: f64| -20.0 * r.log10();
    let atten = db(stop_bp).min(db(stop_n50)).min(db(stop_n60));
    let distortion = (pass_bp - 1.0).abs().max((pass_n - 1.0).abs());

    let hi = tone(5.0, 512.0, 512 * 10);
    let lo = resample(&hi, 512.0, 256.0).unwrap();
    let truth = tone(5.0, 256.0, lo.len());
    let dot: f64 = lo.iter().zip(&truth).map(|(a, b)| a * b).sum();
    let corr = dot / (lo.iter().map(|v| v * v).sum::<f64>() * truth.iter().map(|v| v * v).sum::<f64>()).sqrt();

    let unipolar = Arc::new(MontageLayout::standard_1020());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rec = random_segment(&unipolar, 1280, &mut rng);
    let bip = build_bipolar(&rec).unwrap();
    let labels = bip.montage.labels();
    let pairs_ok = labels.len() == 20
        && labels
            .iter()
            .zip(BIPOLAR_PAIRS)
            .all(|(l, (a, b))| *l == format!("{a}-{b}"));

    let scaled: Vec<f64> = rec.data().iter().map(|v| 37.0 * v + 5.0).collect();
    let z = zscore(&EegSegment::new(scaled, rec.channels(), 256.0, unipolar).unwrap());
    let (mut mu_max, mut sd_err) = (0.0f64, 0.0f64);
    for c in 0..z.channels() {
        let x = z.channel(c);
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        mu_max = mu_max.max(mu.abs());
        sd_err = sd_err.max((sd - 1.0).abs());
    }
    let pass = atten >= 20.0 && distortion <= 0.05 && corr >= 0.999 && pairs_ok && mu_max < 1e-9 && sd_err < 1e-6;
    outcome(
        pass,
        format!(
            "min stopband attenuation {atten:.1} dB, passband distortion {:.2}%, resampler correlation {corr:.6}, \
             bipolar pairs {}, z-score |µ| {mu_max:.1e} |σ−1| {sd_err:.1e}",
            100.0 * distortion,
            if pairs_ok { "in order" } else { "WRONG" }
        ),
    )
}

fn dft_oracle() -> Outcome {
    let p = 40;
    let plan = SpectrumPlan::new(p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let got = plan.features(&x);
        let bins = p / 2 + 1;
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / p as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let mag = (re * re + im * im).sqrt();
            let phase = im.atan2(re);
            // phases of ±π are the same angle
            let dphi = (got[bins + k] - phase + PI).rem_euclid(2.0 * PI) - PI;
            worst = worst.max((got[k] - mag).abs()).max(dphi.abs());
        }
    }
    outcome(
        worst <= 1e-6,
        format!("max deviation from direct DFT {worst:.2e} over 100 patches (limit 1e-6)"),
    )
}

fn reproducibility() -> Outcome {
    let montage = Arc::new(MontageLayout::double_banana());
    let data = synth_eeg(montage, 64, 41, &SynthConfig::default()).unwrap();
    let run = || {
        let mut model = Luna::new(ModelConfig::tiny(), 10).unwrap();
        let opts = PretrainOptions {
            schedule: TrainSchedule {
                peak_lr: 1e-3,
                warmup_steps: 5,
                total_steps: 40,
                batch_size: 4,
                ..TrainSchedule::pretraining(1, 40, 0)
            },
            loss: LossConfig::default(),
            steps: 40,
            seed: 12,
        };
        let trace = pretrain(&mut model, &data, &opts).unwrap();
        (trace, checkpoint_bytes(&model).unwrap())
    };
    let (ta, ca) = run();
    let (tb, cb) = run();
    let bitwise = ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|(a, b)| {
            a.l_rec_masked.to_bits() == b.l_rec_masked.to_bits()
                && a.l_rec_visible.to_bits() == b.l_rec_visible.to_bits()
                && a.l_spec.to_bits() == b.l_spec.to_bits()
        });
    outcome(
        bitwise && ca == cb,
        format!(
            "{} trace rows {}, checkpoints of {} bytes {}",
            ta.len(),
            if bitwise { "bitwise equal" } else { "differ" },
            ca.len(),
            if ca == cb { "identical" } else { "differ" }
        ),
    )
}

type Check = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let checks: [Check; 11] = [
        (
            "permutation invariance",
            permutation_invariance,
            Duration::from_secs(30),
        ),
        ("topology agnosticism", topology_agnosticism, Duration::from_secs(30)),
        ("gradient correctness", gradient_correctness, Duration::from_secs(300)),
        ("loss formulas", loss_formulas, Duration::from_secs(1)),
        ("desk-scale learning", desk_scale_learning, Duration::from_secs(300)),
        (
            "desk-scale fine-tuning",
            desk_scale_finetuning,
            Duration::from_secs(180),
        ),
        ("FLOPs scaling", flops_scaling, Duration::from_secs(120)),
        (
            "analytic-empirical agreement",
            analytic_vs_measured,
            Duration::from_secs(60),
        ),
        ("preprocessing", preprocessing, Duration::from_secs(60)),
        ("DFT oracle", dft_oracle, Duration::from_secs(5)),
        ("reproducibility", reproducibility, Duration::from_secs(600)),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let pass = out.pass && took <= *budget;
        failed += (!pass) as usize;
        println!(
            "{} {:>2} {name}: {} [{:.1}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
