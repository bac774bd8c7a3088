use mkor::datasets::{synth_dataset, LabeledImage};
use mkor::metrics::{match_resolution, mse, psnr, score_batch, ssim, ssim_flagged};
use mkor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t.set(y, x, ch, f(y, x, ch) as f32);
            }
        }
    }
    t
}

/// Deterministic pair also scored with scikit-image
/// (gaussian_weights, sigma 1.5, population covariance, data_range 1).
fn reference_pair(h: usize, w: usize, c: usize) -> (Tensor<f32>, Tensor<f32>) {
    let a = |y: usize, x: usize, ch: usize| ((y * 7 + x * 13 + ch * 5) % 17) as f64 / 16.0;
    let b = |y: usize, x: usize, ch: usize| 0.6 * a(y, x, ch) + 0.4 * ((y * 5 + x * 3 + ch * 2) % 11) as f64 / 10.0;
    (image(h, w, c, a), image(h, w, c, b))
}

fn random(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    image(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
}

/// Straight 2-D window sums, no separable filtering.
fn naive_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w, c) = a.hwc().unwrap();
    let mut k = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-d2).exp();
            s += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / s;
                        let p = a.at(y + i, x + j, ch) as f64;
                        let q = b.at(y + i, x + j, ch) as f64;
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    total / c as f64
}

#[test]
fn psnr_examples() {
    let zeros = Tensor::filled(vec![8, 8, 1], 0.0f32);
    let ones = Tensor::filled(vec![8, 8, 1], 1.0f32);
    assert_eq!(psnr(&ones, &ones).unwrap(), f64::INFINITY);
    assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random(9, 7, 3, &mut rng), random(9, 7, 3, &mut rng));
    let mut m = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        m += (*x as f64 - *y as f64) * (*x as f64 - *y as f64);
    }
    m /= a.len() as f64;
    assert!((mse(&a, &b).unwrap() - m).abs() < 1e-12);
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    assert!(psnr(&a, &zeros).is_err());
}

#[test]
fn ssim_matches_scikit_image() {
    let (a, b) = reference_pair(28, 28, 1);
    assert!((ssim(&a, &b).unwrap() - 0.7847238762406061).abs() < 1e-6);
    let (a, b) = reference_pair(32, 24, 3);
    assert!((ssim(&a, &b).unwrap() - 0.7796115696173717).abs() < 1e-6);
}

#[test]
fn ssim_matches_naive_window_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w, c) in [(11, 11, 1), (16, 20, 1), (24, 24, 3)] {
        let a = random(h, w, c, &mut rng);
        let b = a.map(|v| (0.7 * v + 0.2).min(1.0));
        let noisy = random(h, w, c, &mut rng);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &noisy).unwrap() - naive_ssim(&a, &noisy)).abs() < 1e-6);
    }
}

#[test]
fn ssim_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(28, 28, 1, &mut rng);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
    let small = random(5, 5, 1, &mut rng);
    let (v, fallback) = ssim_flagged(&small, &small.map(|x| x * 0.5)).unwrap();
    assert!(fallback && v < 1.0);
    assert!(!ssim_flagged(&a, &a).unwrap().1);
    assert!(ssim(&a, &small).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..20, w in 11usize..20, c in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(h, w, c, &mut rng), random(h, w, c, &mut rng));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), steps in proptest::collection::vec(0.01f32..0.2, 2..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(8, 8, 1, &mut rng);
        let dir: Vec<f32> = (0..64).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut amp = 0.0f32;
        let mut last = f64::INFINITY;
        for s in steps {
            amp += s;
            let noisy = Tensor::new(vec![8, 8, 1], a.data().iter().zip(&dir).map(|(v, d)| v + amp * d).collect()).unwrap();
            let p = psnr(&a, &noisy).unwrap();
            prop_assert!(p < last);
            prop_assert!(p >= 0.0 || amp > 1.0);
            last = p;
        }
    }

    #[test]
    fn scores_ignore_label_permutations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = synth_dataset(5, 2, 16, 16, 1, seed);
        let recs: Vec<(usize, Tensor<f32>)> = (1..=5).map(|l| (l, random(16, 16, 1, &mut rng))).collect();
        let mut perm: Vec<usize> = (1..=5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |l: usize| perm[l - 1];
        let batch2: Vec<LabeledImage> = batch.iter().map(|d| LabeledImage { image: d.image.clone(), label: relabel(d.label) }).collect();
        let recs2: Vec<(usize, Tensor<f32>)> = recs.iter().map(|(l, t)| (relabel(*l), t.clone())).collect();
        let (s1, s2) = (score_batch(&recs, &batch).unwrap(), score_batch(&recs2, &batch2).unwrap());
        prop_assert!((s1.avg_ssim - s2.avg_ssim).abs() < 1e-12);
        prop_assert!((s1.avg_psnr - s2.avg_psnr).abs() < 1e-12);
        prop_assert_eq!(s1.max_ssim, s2.max_ssim);
    }
}

#[test]
fn perfect_recoveries_score_one() {
    let batch = synth_dataset(4, 1, 16, 16, 3, 0);
    let recs: Vec<(usize, Tensor<f32>)> = batch.iter().map(|d| (d.label, d.image.clone())).collect();
    let s = score_batch(&recs, &batch).unwrap();
    assert_eq!((s.max_ssim, s.avg_ssim), (1.0, 1.0));
    assert_eq!(s.avg_psnr, f64::INFINITY);
    assert!(s.per_class.iter().all(|c| batch[c.matched_index].label == c.label));
    let json = serde_json::to_string(&s).unwrap();
    assert!(json.contains("\"inf\""));
}

#[test]
fn best_match_within_a_class_and_unmatched_labels() {
    let data = synth_dataset(2, 3, 16, 16, 1, 5);
    let class1: Vec<&LabeledImage> = data.iter().filter(|d| d.label == 1).collect();
    let target = class1[2].image.clone();
    let recs = vec![(1, target), (7, Tensor::zeros(vec![16, 16, 1]))];
    let s = score_batch(&recs, &data).unwrap();
    assert_eq!(s.per_class.len(), 1);
    assert_eq!(s.per_class[0].ssim, 1.0);
    assert_eq!(&data[s.per_class[0].matched_index].image, &class1[2].image);
    assert_eq!(s.unmatched, vec![7]);
}

#[test]
fn coarse_recoveries_are_upsampled_for_scoring() {
    let coarse = image(7, 7, 1, |y, x, _| ((y + x) % 2) as f64);
    let fine = match_resolution(&coarse, 28, 28).unwrap();
    assert_eq!(fine.shape(), &[28, 28, 1]);
    for y in 0..28 {
        for x in 0..28 {
            assert_eq!(fine.at(y, x, 0), coarse.at(y / 4, x / 4, 0));
        }
    }
    let back = match_resolution(&fine, 7, 7).unwrap();
    assert_eq!(back, coarse);
}
