use mkor::datasets::{make_batch, synth_dataset, BatchSpec, LabeledImage};
use mkor::fl::audit::ZERO_FRACTION_LIMIT;
use mkor::fl::leakage::closed_form_leakage;
use mkor::fl::pipeline::{build, inject};
use mkor::fl::{
    audit, client_update, client_update_with_stats, leakage_decay_experiment, run_attack, AttackConfig, DefenseConfig,
    NoiseScale,
};
use mkor::nn::engine::{loss_and_gradient, sum_gradients};
use mkor::nn::{build_model, init_params, ModelConfig, ParamSet, Variant};
use proptest::prelude::*;

fn lenet_batch(k: usize, seed: u64) -> Vec<LabeledImage> {
    let data = synth_dataset(10, 20, 28, 28, 1, 1);
    make_batch(&data, &BatchSpec::random(k, seed)).unwrap()
}

#[test]
fn single_sample_update_is_its_gradient() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let params = init_params(&spec, 0);
    let batch = lenet_batch(1, 0);
    let update = client_update(&spec, &params, &batch, &DefenseConfig::default(), 1).unwrap();
    let (_, g) = loss_and_gradient(&spec, &params, &batch[0].image, batch[0].label).unwrap();
    assert_eq!(update.batch_size, 1);
    assert_eq!(update.grads.values, g.values);
}

#[test]
fn undefended_update_is_the_ordered_sum() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Modified, 10)).unwrap();
    let params = init_params(&spec, 1);
    let batch = lenet_batch(7, 1);
    let grads: Vec<ParamSet<f32>> = batch
        .iter()
        .map(|s| loss_and_gradient(&spec, &params, &s.image, s.label).unwrap().1)
        .collect();
    let expect = sum_gradients(&grads).unwrap();
    let defense = DefenseConfig {
        sigma_dp: Some(0.0),
        ..DefenseConfig::default()
    };
    for threads in [1, 2, 3, 8] {
        let update = client_update(&spec, &params, &batch, &defense, threads).unwrap();
        assert_eq!(update.grads, expect.grads, "threads {}", threads);
    }
}

#[test]
fn clipping_brings_each_sample_to_the_norm() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let params = init_params(&spec, 2);
    let batch = lenet_batch(5, 2);
    let norms: Vec<f64> = batch
        .iter()
        .map(|s| {
            loss_and_gradient(&spec, &params, &s.image, s.label)
                .unwrap()
                .1
                .l2_norm()
        })
        .collect();
    let c = norms.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    for s in &batch {
        let defense = DefenseConfig {
            clip: Some(c),
            ..DefenseConfig::default()
        };
        let (one, stats) = client_update_with_stats(&spec, &params, std::slice::from_ref(s), &defense, 1).unwrap();
        assert_eq!(stats.clipped, 1);
        assert!((one.grads.l2_norm() - c).abs() < 1e-5 * c);
    }
    let defense = DefenseConfig {
        clip: Some(c),
        ..DefenseConfig::default()
    };
    let (_, stats) = client_update_with_stats(&spec, &params, &batch, &defense, 1).unwrap();
    assert_eq!(stats.clipped, 5);
    assert_eq!(stats.sample_norms, norms);
}

#[test]
fn defense_validation() {
    let bad = [
        DefenseConfig {
            clip: Some(0.0),
            ..DefenseConfig::default()
        },
        DefenseConfig {
            sigma_dp: Some(-1.0),
            ..DefenseConfig::default()
        },
    ];
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let params = init_params(&spec, 0);
    for d in &bad {
        assert!(d.validate().is_err());
        assert!(client_update(&spec, &params, &lenet_batch(2, 0), d, 1).is_err());
    }
    assert!(client_update(&spec, &params, &[], &DefenseConfig::default(), 1).is_err());
    assert_eq!(NoiseScale::parse("layer-rms").unwrap(), NoiseScale::LayerRms);
    assert!(NoiseScale::parse("loud").is_err());
}

#[test]
fn noise_is_seeded_and_scaled_to_the_gradient() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let params = init_params(&spec, 3);
    let batch = lenet_batch(4, 3);
    let clean = client_update(&spec, &params, &batch, &DefenseConfig::default(), 1).unwrap();
    let rms = |v: &[f32]| (v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let defense = |seed| DefenseConfig {
        sigma_dp: Some(0.1),
        seed,
        ..DefenseConfig::default()
    };
    let (a, stats) = client_update_with_stats(&spec, &params, &batch, &defense(5), 1).unwrap();
    let b = client_update(&spec, &params, &batch, &defense(5), 1).unwrap();
    let c = client_update(&spec, &params, &batch, &defense(6), 1).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_ne!(a.grads, c.grads);
    assert!((stats.noise_std - 0.1 * rms(&clean.grads.values)).abs() < 1e-9);
    let diff: Vec<f32> = a
        .grads
        .values
        .iter()
        .zip(&clean.grads.values)
        .map(|(x, y)| x - y)
        .collect();
    let measured = rms(&diff);
    assert!(
        (measured / stats.noise_std - 1.0).abs() < 0.02,
        "{} vs {}",
        measured,
        stats.noise_std
    );

    let elementwise = DefenseConfig {
        sigma_dp: Some(0.1),
        noise_scale: NoiseScale::Elementwise,
        ..DefenseConfig::default()
    };
    let e = client_update(&spec, &params, &batch, &elementwise, 1).unwrap();
    for (x, y) in e.grads.values.iter().zip(&clean.grads.values) {
        if *y == 0.0 {
            assert_eq!(*x, 0.0);
        }
    }
}

#[test]
fn leakage_examples() {
    assert!((closed_form_leakage(2) - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!((closed_form_leakage(2) - 0.3466).abs() < 1e-4);
    assert!(closed_form_leakage(1024) < 5e-4);
    let ks: Vec<usize> = (1..=8).map(|p| 1 << p).collect();
    let curve = leakage_decay_experiment(8, &ks, 20_000, 1).unwrap();
    assert!(
        (curve.closed_form_slope + 1.0).abs() <= 0.1,
        "{}",
        curve.closed_form_slope
    );
    assert!((curve.sampled_slope + 1.0).abs() <= 0.2, "{}", curve.sampled_slope);
    for w in curve.points.windows(2) {
        assert!(w[1].closed_form < w[0].closed_form);
        assert!(w[1].sampled < w[0].sampled, "{:?}", w);
    }
    assert!(leakage_decay_experiment(4, &[1, 2], 10, 0).is_err());
    assert!(leakage_decay_experiment(0, &[2], 10, 0).is_err());
    assert!(leakage_decay_experiment(4, &[2], 2, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_leakage_decreases(k in 2usize..100_000) {
        prop_assert!(closed_form_leakage(k + 1) < closed_form_leakage(k));
        // K - 1 complexity: K * leakage tends to 1/2
        prop_assert!(((k as f64 - 1.0) * closed_form_leakage(k) - 0.5).abs() <= 0.5 / k as f64 + 1e-12);
    }
}

#[test]
fn audit_of_identical_parameters_is_clean() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let p = init_params(&spec, 0);
    let r = audit(&p, &p, None).unwrap();
    assert!(!r.flagged());
    assert!(r
        .layers
        .iter()
        .all(|l| l.modified_fraction == 0.0 && l.zero_fraction == 0.0));
    let other = build_model(&ModelConfig::new(Variant::Lenet5Modified, 10)).unwrap();
    assert!(audit(&p, &init_params(&other, 0), None).is_err());
}

#[test]
fn audit_catches_a_zeroed_layer() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let reference = init_params(&spec, 0);
    let mut fishing = reference.clone();
    let last = *spec.fc_layers().last().unwrap();
    let w = fishing.weight_mut(last).unwrap();
    let keep = (w.len() as f64 * 0.001).ceil() as usize;
    w[keep..].fill(0.0);
    let r = audit(&reference, &fishing, None).unwrap();
    assert!(r.flagged());
    let layer = r.layers.iter().find(|l| l.layer == last).unwrap();
    assert!(layer.zero_fraction > ZERO_FRACTION_LIMIT);
    assert!(layer.flagged);
}

#[test]
fn audit_flags_naive_injection_but_not_inconspicuous() {
    let model = ModelConfig::new(Variant::Vgg16Original, 100).with_input_side(64);
    let mut cfg = AttackConfig::new(model);
    let (spec, reference) = build(&cfg).unwrap();
    let quiet = inject(&spec, &reference, &cfg).unwrap();
    let r = audit(&reference, &quiet.params, None).unwrap();
    assert!(!r.flagged(), "{:?}", r.flags);
    assert!(r.peak_modified_fraction <= 0.14, "{}", r.peak_modified_fraction);
    cfg.fc_mode = mkor::attack::fc::InjectionMode::Naive;
    cfg.conv_mode = mkor::attack::fc::InjectionMode::Naive;
    let loud = inject(&spec, &reference, &cfg).unwrap();
    assert!(audit(&reference, &loud.params, None).unwrap().flagged());
}

#[test]
fn lenet_is_too_small_to_hide_the_conv_chain() {
    // the plan covers most filters of both small conv layers
    let cfg = AttackConfig::new(ModelConfig::new(Variant::Lenet5Original, 10));
    let (spec, reference) = build(&cfg).unwrap();
    let injected = inject(&spec, &reference, &cfg).unwrap();
    let r = audit(&reference, &injected.params, None).unwrap();
    assert!(r
        .layers
        .iter()
        .filter(|l| l.flagged)
        .all(|l| spec.conv_layers().contains(&l.layer)));
    assert!(r.flagged());
}

#[test]
fn audit_dominance_statistic() {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10)).unwrap();
    let p = init_params(&spec, 0);
    let r = audit(&p, &p, Some(&[1.0, 1.0, 1.0, 1.0])).unwrap();
    assert_eq!(r.max_sample_share, Some(0.25));
    assert!(!r.flagged());
    let r = audit(&p, &p, Some(&[100.0, 1.0, 1.0])).unwrap();
    assert!(r.flagged());
    let r = audit(&p, &p, Some(&[5.0])).unwrap();
    assert!(!r.flagged());
}

#[test]
fn injected_batches_are_not_dominated_by_one_sample() {
    for variant in [Variant::Lenet5Original, Variant::Lenet5Modified] {
        let cfg = AttackConfig::new(ModelConfig::new(variant, 10));
        let (spec, reference) = build(&cfg).unwrap();
        let injected = inject(&spec, &reference, &cfg).unwrap();
        for seed in 0..3 {
            let batch = lenet_batch(20, seed);
            let (_, stats) =
                client_update_with_stats(&spec, &injected.params, &batch, &DefenseConfig::default(), 1).unwrap();
            let r = audit(&reference, &injected.params, Some(&stats.sample_norms)).unwrap();
            let (max, mean) = (r.max_sample_share.unwrap(), r.mean_sample_share.unwrap());
            assert!(max <= 10.0 * mean, "{:?} {}: {} vs {}", variant, seed, max, mean);
            assert!(r.flags.iter().all(|f| f.starts_with("layer")), "{:?}", r.flags);
        }
    }
}

#[test]
fn run_attack_reports_absent_classes() {
    let cfg = AttackConfig::new(ModelConfig::new(Variant::Lenet5Original, 10));
    let data = synth_dataset(10, 3, 28, 28, 1, 2);
    let batch: Vec<LabeledImage> = data.into_iter().filter(|d| d.label <= 4).collect();
    let a = run_attack(&cfg, &batch).unwrap();
    let sink = a.report.sink_class.unwrap();
    let expect: Vec<usize> = (1..=4).filter(|&c| c != sink).collect();
    assert_eq!(a.report.present, expect);
    assert_eq!(a.images.len(), expect.len());
    assert!(a.report.absent.iter().all(|c| *c > 4 && *c != sink));
    let score = a.report.score.as_ref().unwrap();
    assert_eq!(score.per_class.len(), expect.len());
}

#[test]
fn run_attack_is_deterministic_under_noise() {
    let mut cfg = AttackConfig::new(ModelConfig::new(Variant::Lenet5Original, 10));
    cfg.defense = DefenseConfig {
        clip: Some(5.0),
        sigma_dp: Some(1e-2),
        seed: 4,
        ..DefenseConfig::default()
    };
    let batch = lenet_batch(30, 4);
    let a = run_attack(&cfg, &batch).unwrap();
    let b = run_attack(&cfg, &batch).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.images, b.images);
    assert_eq!(a.client.sample_norms, b.client.sample_norms);
    cfg.defense.seed = 5;
    let c = run_attack(&cfg, &batch).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn threads_do_not_change_the_attack() {
    let mut cfg = AttackConfig::new(ModelConfig::new(Variant::Lenet5Modified, 10));
    let batch = lenet_batch(12, 9);
    let a = run_attack(&cfg, &batch).unwrap();
    cfg.threads = 4;
    let b = run_attack(&cfg, &batch).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.images, b.images);
}
