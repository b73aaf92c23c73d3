use luna_core::embedding::{sample_mask, Patches};
use luna_core::losses::{smooth_l1, specialization_loss};
use luna_core::optim::AdamW;
use luna_core::signal::{EegSegment, MontageLayout};
use luna_core::synth::{synth_eeg, SynthConfig};
use luna_core::train::{finetune, pretrain, pretrain_objective, FinetuneOptions, PretrainOptions};
use luna_core::{LossConfig, Luna, ModelConfig, Tensor, TrainSchedule};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn random_batch(montage: &Arc<MontageLayout>, b: usize, samples: usize, seed: u64) -> Vec<EegSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| {
            let t = Tensor::randn(&[montage.len() * samples], 1.0, &mut rng);
            EegSegment::new(t.into_data(), montage.len(), 256.0, montage.clone()).unwrap()
        })
        .collect()
}

fn shared_model() -> Luna {
    let mut m = Luna::new(ModelConfig::tiny(), 21).unwrap();
    m.attach_classifier(3).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn channel_order_does_not_matter(c in 1usize..12, seed in 0u64..1000) {
        let model = shared_model();
        let m = Arc::new(MontageLayout::seed62().truncated(c, format!("s{c}")).unwrap());
        let segs = random_batch(&m, 2, 80, seed);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let permuted: Vec<EegSegment> = segs.iter().map(|s| s.permuted(&perm).unwrap()).collect();
        let a = model.infer(&segs.iter().collect::<Vec<_>>()).unwrap();
        let b = model.infer(&permuted.iter().collect::<Vec<_>>()).unwrap();
        prop_assert!(a.unified.max_abs_diff(&b.unified) <= 1e-10);
        prop_assert!(a.logits.unwrap().max_abs_diff(&b.logits.unwrap()) <= 1e-10);
        // affinity columns follow the channels
        let (rows, cols) = (a.affinity.len() / c, c);
        for r in 0..rows {
            for (new, &old) in perm.iter().enumerate() {
                let d = a.affinity.data()[r * cols + old] - b.affinity.data()[r * cols + new];
                prop_assert!(d.abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn smooth_l1_shape(d in -10f64..10.0, beta in 0.01f64..5.0) {
        let v = smooth_l1(d, 0.0, beta);
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v, smooth_l1(0.0, d, beta));
        let want = if d.abs() < beta { 0.5 * d * d } else { beta * d.abs() - 0.5 * beta * beta };
        prop_assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn specialization_penalty_is_nonnegative_and_channel_blind(
        vals in prop::collection::vec(0.01f64..1.0, 12),
        seed in 0u64..100,
    ) {
        // two patches, Q = 2 rows over C = 3 channels, rows normalized
        let mut a = vals.clone();
        for row in a.chunks_mut(3) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(vec![2, 2, 3], a.clone()).unwrap();
        let l = specialization_loss(&t, 0.8).unwrap();
        prop_assert!(l >= -1e-15);
        let mut perm = [0usize, 1, 2];
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<f64> = a.chunks(3).flat_map(|r| perm.iter().map(move |&p| r[p])).collect();
        let l2 = specialization_loss(&Tensor::new(vec![2, 2, 3], shuffled).unwrap(), 0.8).unwrap();
        prop_assert!((l - l2).abs() < 1e-12);
    }
}

#[test]
fn any_montage_gives_the_same_output_shape() {
    let model = shared_model();
    let want = [3, 5, model.config.hidden_size()];
    for c in [1, 3, 20, 22, 29, 62] {
        let m = Arc::new(MontageLayout::seed62().truncated(c, format!("s{c}")).unwrap());
        let segs = random_batch(&m, 3, 200, c as u64);
        let inf = model.infer(&segs.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(inf.e_out.shape(), want);
        assert_eq!(inf.affinity.shape(), [15, model.config.num_queries, c]);
        for row in inf.affinity.data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let sphere = Arc::new(MontageLayout::spherical(100).unwrap());
    let segs = random_batch(&sphere, 1, 40, 9);
    assert_eq!(
        model.infer(&[&segs[0]]).unwrap().e_out.shape(),
        [1, 1, model.config.hidden_size()]
    );
}

#[test]
fn mixed_montages_in_one_batch_are_rejected() {
    let model = shared_model();
    let a = Arc::new(MontageLayout::standard_1020());
    let b = Arc::new(MontageLayout::double_banana());
    let (x, y) = (random_batch(&a, 1, 40, 1), random_batch(&b, 1, 40, 2));
    assert!(model.infer(&[&x[0], &y[0]]).is_err());
    let short = random_batch(&a, 1, 41, 3);
    assert!(model.infer(&[&short[0]]).is_err());
}

#[test]
fn nothing_to_reconstruct_means_zero_loss_and_gradient() {
    let mut model = Luna::new(ModelConfig::tiny(), 2).unwrap();
    let m = Arc::new(MontageLayout::double_banana());
    model.extend_bank(&m).unwrap();
    let segs = random_batch(&m, 2, 120, 4);
    let patches = Patches::from_segments(&segs.iter().collect::<Vec<_>>(), 40).unwrap();
    let loss = LossConfig {
        alpha: 0.0,
        lambda_spec: 0.0,
        ..LossConfig::default()
    };
    let mut g = model.graph();
    let p = model.store.bind(&mut g);
    let mask = vec![false; 2 * 3 * 20];
    let o = pretrain_objective(&model, &mut g, &p, &patches, &m, mask, &loss, None).unwrap();
    assert_eq!(g.value(o.total).item().unwrap(), 0.0);
    assert_eq!(o.terms.masked, 0.0);
    let grads = g.backward(o.total).unwrap();
    assert!(p
        .collect_grads(&grads, &model.store)
        .iter()
        .flatten()
        .all(|&v| v == 0.0));
}

#[test]
fn mask_has_exact_count_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = sample_mask(4, 5, 7, 0.5, &mut rng).unwrap();
    for sample in mask.chunks(35) {
        assert_eq!(sample.iter().filter(|&&m| m).count(), 18);
    }
    assert!(sample_mask(1, 2, 2, 1.0, &mut rng).is_err());
}

fn tiny_pretrain(lr: f64, seed: u64) -> (Luna, Vec<luna_core::train::LossRecord>) {
    let m = Arc::new(MontageLayout::double_banana());
    let data = synth_eeg(
        m,
        8,
        3,
        &SynthConfig {
            seconds: 1.25,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let mut model = Luna::new(ModelConfig::tiny(), 5).unwrap();
    let opts = PretrainOptions {
        schedule: TrainSchedule {
            peak_lr: lr,
            min_lr: 0.0,
            warmup_steps: 0,
            total_steps: 4,
            batch_size: 2,
            ..TrainSchedule::pretraining(1, 4, 0)
        },
        loss: LossConfig::default(),
        steps: 4,
        seed,
    };
    let trace = pretrain(&mut model, &data, &opts).unwrap();
    (model, trace)
}

#[test]
fn zero_learning_rate_changes_nothing_but_the_bank() {
    let (trained, trace) = tiny_pretrain(0.0, 1);
    let mut fresh = Luna::new(ModelConfig::tiny(), 5).unwrap();
    fresh.extend_bank(&MontageLayout::double_banana()).unwrap();
    assert_eq!(trained.store, fresh.store);
    assert_eq!(trace.len(), 4);
    assert!(trace.iter().all(|r| r.lr == 0.0));
}

#[test]
fn pretraining_is_deterministic_per_seed() {
    let (a, ta) = tiny_pretrain(1e-3, 7);
    let (b, tb) = tiny_pretrain(1e-3, 7);
    let (_, tc) = tiny_pretrain(1e-3, 8);
    assert_eq!(ta, tb);
    assert_eq!(a.store, b.store);
    assert_ne!(ta, tc);
}

#[test]
fn layer_decay_scales_by_depth() {
    let sched = TrainSchedule::finetuning(1, 1, 0);
    assert_eq!(AdamW::depth_factor(&sched, 5, 5), 1.0);
    assert_eq!(AdamW::depth_factor(&sched, 3, 5), 0.25);
    assert_eq!(AdamW::depth_factor(&sched, 0, 5), 0.5f64.powi(5));
    let flat = TrainSchedule {
        layer_decay: None,
        ..sched
    };
    assert_eq!(AdamW::depth_factor(&flat, 0, 5), 1.0);

    let model = shared_model();
    let depth = |prefix: &str| model.store.iter().find(|(n, _)| n.starts_with(prefix)).unwrap().1.depth;
    assert!(depth("embed.") < depth("unify."));
    assert!(depth("unify.") < depth("temporal."));
    assert!(depth("temporal.") < depth("head."));
}

#[test]
fn finetuning_keeps_the_decoder_frozen() {
    let m = Arc::new(MontageLayout::double_banana());
    let cfg = SynthConfig {
        seconds: 1.25,
        n_classes: Some(2),
        ..SynthConfig::default()
    };
    let data = synth_eeg(m.clone(), 6, 2, &cfg).unwrap();
    let mut model = Luna::new(ModelConfig::tiny(), 3).unwrap();
    model.extend_bank(&m).unwrap();
    let before = model.store.clone();
    let opts = FinetuneOptions {
        schedule: TrainSchedule {
            peak_lr: 1e-3,
            batch_size: 3,
            ..TrainSchedule::finetuning(2, 2, 0)
        },
        epochs: 2,
        max_steps: None,
        seed: 1,
        freeze_decoder: true,
    };
    let report = finetune(&mut model, &data, None, 2, &opts).unwrap();
    assert_eq!(report.steps, 4);
    for (name, entry) in model.store.iter() {
        let old = before.by_name(name);
        if name.starts_with("decoder.") {
            assert_eq!(Some(entry), old, "{name} moved");
        } else if name.starts_with("embed.conv0") {
            assert_ne!(Some(entry), old, "{name} did not move");
        }
    }
}
