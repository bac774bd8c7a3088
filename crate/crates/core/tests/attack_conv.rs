use mkor::attack::conv::{
    build_conv_plan, calibrate_magnitude, estimate_input, inject_conv_inconspicuous, inject_conv_naive, input_bounds,
    inverse_sigmoid, lenet_reconstruct, region_of, Calibration, ConvInjectConfig, ConvPlan, FillMode, FilterRole,
    Polarity,
};
use mkor::datasets::synth_dataset;
use mkor::metrics::psnr;
use mkor::nn::engine::forward;
use mkor::nn::{build_model, init_params, ModelConfig, ModelSpec, ParamSet, Variant};
use mkor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vgg(variant: Variant) -> ModelSpec {
    build_model(&ModelConfig::new(variant, 10).with_input_side(64)).unwrap()
}

fn vgg_plan(spec: &ModelSpec, seed: u64) -> ConvPlan {
    build_conv_plan(spec, 3, 2, seed).unwrap()
}

fn z0(spec: &ModelSpec, params: &ParamSet<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let out = forward(spec, params, x).unwrap();
    out[spec.flatten_index().unwrap() - 1].clone()
}

fn random_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

/// Brute-force max of x (or of 1 - x) over each considered element's region.
fn regional_oracle(x: &Tensor<f32>, plan: &ConvPlan, h: usize, w: usize, c: usize) -> f32 {
    let Some(r) = region_of(h, w, c, plan).unwrap() else {
        return 0.0;
    };
    let mut best = 0.0f32;
    for y in r.rows.0..=r.rows.1 {
        for xx in r.cols.0..=r.cols.1 {
            let v = x.at(y, xx, r.color);
            best = best.max(match r.polarity {
                Polarity::Max => v,
                Polarity::Min => 1.0 - v,
            });
        }
    }
    best
}

fn check_oracle(variant: Variant, images: usize) {
    let spec = vgg(variant);
    let plan = vgg_plan(&spec, 4);
    let params = inject_conv_naive(&spec, &init_params(&spec, 1), &plan).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let [oh, ow, _] = plan.output_shape;
    for _ in 0..images {
        let x = random_image(spec.input_shape, &mut rng);
        let z = z0(&spec, &params, &x);
        for fc in &plan.channels {
            for h in 0..oh {
                for w in 0..ow {
                    let expect = regional_oracle(&x, &plan, h, w, fc.channel);
                    assert_eq!(
                        z.at(h, w, fc.channel),
                        expect,
                        "{:?} ({}, {}, {})",
                        variant,
                        h,
                        w,
                        fc.channel
                    );
                }
            }
        }
    }
}

#[test]
fn plan_channel_budget() {
    let spec = build_model(&ModelConfig::new(Variant::Vgg16Original, 100)).unwrap();
    let plan = vgg_plan(&spec, 0);
    assert_eq!(plan.channels.len(), 384);
    assert_eq!(plan.output_shape, [7, 7, 512]);
    assert_eq!(7 * (1 << (plan.i_count + plan.j_count)), 224);
    let blur = build_conv_plan(&spec, 0, 5, 0).unwrap();
    assert_eq!(blur.channels.len(), 6);
    assert!(build_conv_plan(&spec, 4, 2, 0).is_err());
    let mut chans: Vec<usize> = plan.channels.iter().map(|c| c.channel).collect();
    chans.sort();
    chans.dedup();
    assert_eq!(chans.len(), 384);
    let maxes = plan.channels.iter().filter(|c| c.polarity == Polarity::Max).count();
    assert_eq!(maxes, 192);
    let json = serde_json::to_string(&plan).unwrap();
    assert_eq!(serde_json::from_str::<ConvPlan>(&json).unwrap(), plan);
    assert_ne!(vgg_plan(&spec, 1), plan);
}

#[test]
fn region_examples() {
    let spec = build_model(&ModelConfig::new(Variant::Vgg16Original, 10)).unwrap();
    let plan = vgg_plan(&spec, 2);
    let unshifted = plan
        .channels
        .iter()
        .find(|c| c.shifts.iter().all(|r| *r == FilterRole::Copy))
        .unwrap();
    let r = region_of(0, 0, unshifted.channel, &plan).unwrap().unwrap();
    assert_eq!((r.rows, r.cols), ((0, 31), (0, 31)));
    let r = region_of(2, 3, unshifted.channel, &plan).unwrap().unwrap();
    assert_eq!((r.rows, r.cols), ((64, 95), (96, 127)));

    // shifts read to the right / below; per layer 2^(i + J - 1) input pixels
    let right = plan
        .channels
        .iter()
        .find(|c| c.shifts.iter().all(|r| *r == FilterRole::Right))
        .unwrap();
    assert_eq!(right.cols.offset - unshifted.cols.offset, 4 + 8 + 16);
    assert_eq!(right.rows.offset, unshifted.rows.offset);
    assert_eq!(right.shift_indicators(), vec![(true, false); 3]);
    let r = region_of(0, 0, right.channel, &plan).unwrap().unwrap();
    assert_eq!((r.rows, r.cols), ((0, 31), (28, 59)));
    // clipped at the right border
    let r = region_of(0, 6, right.channel, &plan).unwrap().unwrap();
    assert_eq!(r.cols, (220, 223));

    assert!(region_of(7, 0, unshifted.channel, &plan).is_err());
    let unused = (0..512).find(|c| plan.channel(*c).is_none()).unwrap();
    assert!(region_of(0, 0, unused, &plan).is_err());
}

#[test]
fn shift_filter_reads_right_neighbour() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 3);
    let params = inject_conv_naive(&spec, &init_params(&spec, 0), &plan).unwrap();
    // a single bright pixel lights exactly the elements whose region covers it
    let mut x = Tensor::zeros(vec![64, 64, 3]);
    x.set(37, 45, 1, 1.0);
    let z = z0(&spec, &params, &x);
    for fc in plan.channels.iter().filter(|c| c.polarity == Polarity::Max) {
        for h in 0..2 {
            for w in 0..2 {
                let covers = region_of(h, w, fc.channel, &plan).unwrap().is_some_and(|r| {
                    r.color == 1 && (r.rows.0..=r.rows.1).contains(&37) && (r.cols.0..=r.cols.1).contains(&45)
                });
                assert_eq!(z.at(h, w, fc.channel) == 1.0, covers);
            }
        }
    }
}

#[test]
fn regional_extrema_oracle_original() {
    check_oracle(Variant::Vgg16Original, 50);
}

#[test]
fn regional_extrema_oracle_modified() {
    check_oracle(Variant::Vgg16Modified, 50);
}

#[test]
fn beta_scales_features_and_cancels_in_estimate() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 5);
    assert_eq!(plan.layers.len(), 13);
    let base = init_params(&spec, 2);
    let p1 = inject_conv_naive(&spec, &base, &plan).unwrap();
    let plan2 = plan.clone().with_beta(2.0);
    let p2 = inject_conv_naive(&spec, &base, &plan2).unwrap();
    let cfg = ConvInjectConfig {
        beta: Some(2.0),
        sigma: 0.0,
        ..ConvInjectConfig::default()
    };
    let (p3, plan3) = inject_conv_inconspicuous(&spec, &base, &plan, &cfg).unwrap();
    assert_eq!(plan3, plan2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..3 {
        let x = random_image(spec.input_shape, &mut rng);
        let (a, b, c) = (z0(&spec, &p1, &x), z0(&spec, &p2, &x), z0(&spec, &p3, &x));
        for fc in &plan.channels {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(b.at(h, w, fc.channel), a.at(h, w, fc.channel) * 8192.0);
                    assert_eq!(c.at(h, w, fc.channel), b.at(h, w, fc.channel));
                }
            }
        }
        let e1 = estimate_input(&a, &plan, FillMode::MidGray).unwrap();
        let e3 = estimate_input(&c, &plan3, FillMode::MidGray).unwrap();
        assert!(e1
            .image
            .data()
            .iter()
            .zip(e3.image.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

/// Largest deviation of considered-channel features (beta divided out) between
/// noisy and noise-free inconspicuous injection.
fn contamination(sigma: f64) -> f32 {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 7);
    let base = init_params(&spec, 3);
    let quiet = ConvInjectConfig {
        sigma: 0.0,
        ..ConvInjectConfig::default()
    };
    let noisy = ConvInjectConfig {
        sigma,
        ..ConvInjectConfig::default()
    };
    let (pq, plan_q) = inject_conv_inconspicuous(&spec, &base, &plan, &quiet).unwrap();
    let (pn, _) = inject_conv_inconspicuous(&spec, &base, &plan, &noisy).unwrap();
    let scale = plan_q.beta_product() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for _ in 0..3 {
        let x = random_image(spec.input_shape, &mut rng);
        let (a, b) = (z0(&spec, &pq, &x), z0(&spec, &pn, &x));
        for fc in &plan.channels {
            for h in 0..2 {
                for w in 0..2 {
                    worst = worst.max((a.at(h, w, fc.channel) - b.at(h, w, fc.channel)).abs() / scale);
                }
            }
        }
    }
    worst
}

#[test]
fn noise_contamination_grows_linearly_with_sigma() {
    // 13 layers of up to 384 noisy inputs each: roughly 200 sigma at the output
    let small = contamination(1e-4);
    let large = contamination(1e-3);
    assert!(small < 0.1, "{}", small);
    assert!(small > 0.0);
    let ratio = large / small;
    assert!((5.0..20.0).contains(&ratio), "{}", ratio);
}

#[test]
fn last_conv_modified_fraction() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 0);
    let base = init_params(&spec, 0);
    let (out, _) = inject_conv_inconspicuous(&spec, &base, &plan, &ConvInjectConfig::default()).unwrap();
    let last = *spec.conv_layers().last().unwrap();
    let mut changed = 0usize;
    let mut total = 0usize;
    for (a, b) in [
        (base.weight(last).unwrap(), out.weight(last).unwrap()),
        (base.bias(last).unwrap(), out.bias(last).unwrap()),
    ] {
        total += a.len();
        changed += a.iter().zip(b).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    let frac = changed as f64 / total as f64;
    assert!(frac > 0.05 && frac <= 0.14, "{}", frac);
}

#[test]
fn constant_image_is_recovered_exactly() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 1);
    let params = inject_conv_naive(&spec, &init_params(&spec, 0), &plan).unwrap();
    for c in [0.0f32, 0.25, 0.5, 1.0] {
        let x = Tensor::filled(vec![64, 64, 3], c);
        let est = estimate_input(&z0(&spec, &params, &x), &plan, FillMode::MidGray).unwrap();
        let bounds = input_bounds(&z0(&spec, &params, &x), &plan).unwrap();
        for i in 0..x.len() {
            if bounds.upper[i].is_some() && bounds.lower[i].is_some() {
                assert_eq!(est.image.data()[i], c);
            }
        }
        assert!(est.report.both_bounds > x.len() / 2);
        assert_eq!(est.report.inverted, 0);
    }
}

#[test]
fn bounds_sandwich_the_truth() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 9);
    let params = inject_conv_naive(&spec, &init_params(&spec, 0), &plan).unwrap();
    let data = synth_dataset(10, 5, 64, 64, 3, 3);
    assert_eq!(data.len(), 50);
    for item in &data {
        let z = z0(&spec, &params, &item.image);
        let b = input_bounds(&z, &plan).unwrap();
        for (i, &t) in item.image.data().iter().enumerate() {
            if let (Some(u), Some(l)) = (b.upper[i], b.lower[i]) {
                // min channels hold 1 - x in f32, so the lower bound carries one rounding
                assert!(l <= t as f64 + 1e-7 && t as f64 <= u, "{} <= {} <= {}", l, t, u);
            }
        }
        let est = estimate_input(&z, &plan, FillMode::Nearest).unwrap();
        assert!(est.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(est.report.inverted, 0);
    }
}

#[test]
fn estimate_rejects_wrong_shape() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 0);
    assert!(estimate_input(&Tensor::zeros(vec![7, 7, 512]), &plan, FillMode::Zero).is_err());
}

#[test]
fn sigmoid_inverse_examples() {
    for i in 0..=98 {
        let x = 0.01 + i as f64 * 0.01;
        let (y, clamped) = inverse_sigmoid(x, 1e-6);
        assert!(!clamped);
        assert!((1.0 / (1.0 + (-y).exp()) - x).abs() < 1e-12);
    }
    assert!(inverse_sigmoid(0.0, 1e-6).1);
    assert!(inverse_sigmoid(1.0, 1e-6).1);
    assert!(inverse_sigmoid(1.0, 1e-6).0.is_finite());
}

fn lenet(variant: Variant) -> (ModelSpec, ConvPlan, ParamSet<f32>) {
    let spec = build_model(&ModelConfig::new(variant, 10)).unwrap();
    let stages = spec.downsampling_stages().len();
    let plan = build_conv_plan(&spec, stages.min(3), 0, 1).unwrap();
    let params = inject_conv_naive(&spec, &init_params(&spec, 0), &plan).unwrap();
    (spec, plan, params)
}

#[test]
fn modified_lenet_inverts_exactly() {
    let (spec, plan, params) = lenet(Variant::Lenet5Modified);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let x = random_image(spec.input_shape, &mut rng);
        let est = lenet_reconstruct(&z0(&spec, &params, &x), &spec, &plan, FillMode::Zero).unwrap();
        let described = est.described.iter().filter(|&&d| d).count();
        assert!(described > x.len() / 2);
        for i in 0..x.len() {
            if est.described[i] {
                assert!((est.image.data()[i] - x.data()[i]).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn original_lenet_inverts_to_block_means() {
    let (spec, plan, params) = lenet(Variant::Lenet5Original);
    for item in synth_dataset(5, 2, 28, 28, 1, 4) {
        // the unpadded second conv leaves a 4 pixel frame undescribed
        let est = lenet_reconstruct(&z0(&spec, &params, &item.image), &spec, &plan, FillMode::Nearest).unwrap();
        let p = psnr(&est.image, &item.image).unwrap();
        assert!(p.is_finite() && p > 10.0, "{}", p);
    }
}

#[test]
fn sigmoid_inversion_needs_a_sigmoid_plan() {
    let spec = vgg(Variant::Vgg16Original);
    let plan = vgg_plan(&spec, 0);
    assert!(lenet_reconstruct(&Tensor::zeros(vec![2, 2, 512]), &spec, &plan, FillMode::Zero).is_err());
}

#[test]
fn calibration_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut x = random_image([8, 8, 1], &mut rng);
    x.data_mut()[0] = 0.0;
    x.data_mut()[1] = 1.0;
    assert_eq!(calibrate_magnitude(&x, Calibration::MinMax, None).unwrap(), x);
    let scaled = x.map(|v| v * 3.5);
    let back = calibrate_magnitude(&scaled, Calibration::MinMax, None).unwrap();
    assert!(back.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    let flat = Tensor::filled(vec![4, 4, 1], 0.3f32);
    assert_eq!(calibrate_magnitude(&flat, Calibration::MinMax, None).unwrap(), flat);
    let matched = calibrate_magnitude(&x, Calibration::HistogramMatch, Some(&x)).unwrap();
    assert!(matched.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(calibrate_magnitude(&x, Calibration::HistogramMatch, None).is_err());
    assert_eq!(Calibration::parse("minmax").unwrap(), Calibration::MinMax);
    assert!(Calibration::parse("gamma").is_err());
}

proptest! {
    #[test]
    fn histogram_match_is_monotone(values in proptest::collection::vec(0.0f32..1.0, 2..64), seed in any::<u64>()) {
        let n = values.len();
        let image = Tensor::new(vec![1, n, 1], values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_image([4, 4, 1], &mut rng);
        let out = calibrate_magnitude(&image, Calibration::HistogramMatch, Some(&reference)).unwrap();
        let lo = reference.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = reference.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for i in 0..n {
            prop_assert!(out.data()[i] >= lo - 1e-6 && out.data()[i] <= hi + 1e-6);
            for j in 0..n {
                if image.data()[i] < image.data()[j] {
                    prop_assert!(out.data()[i] <= out.data()[j]);
                }
            }
        }
    }

    #[test]
    fn minmax_is_affine_invariant(values in proptest::collection::vec(0.0f32..1.0, 4..32), gamma in 0.1f32..50.0) {
        let n = values.len();
        let image = Tensor::new(vec![n, 1, 1], values).unwrap();
        let a = calibrate_magnitude(&image, Calibration::MinMax, None).unwrap();
        let b = calibrate_magnitude(&image.map(|v| v * gamma), Calibration::MinMax, None).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-4));
    }
}
