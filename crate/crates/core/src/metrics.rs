//! Image quality metrics and batch scoring.

use serde::{Deserialize, Serialize};

use crate::datasets::{resize_nearest, LabeledImage};
use crate::error::{MkorError, Result};
use crate::tensor::Tensor;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MkorError::ShapeMismatch(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// PSNR in dB for dynamic range 1; infinite for identical images.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an h x w plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_index(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, bool) {
    if h < WINDOW || w < WINDOW {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return (ssim_index(ma, mb, va, vb, cov), true);
    }
    let k = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter(a, h, w, &k);
    let mu_b = filter(b, h, w, &k);
    let aa = filter(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter(&prod(&|x, y| x * y), h, w, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_index(ma, mb, aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb)
        })
        .sum();
    (total / mu_a.len() as f64, false)
}

/// SSIM plus a flag telling whether the image was too small for the window
/// and global statistics were used instead.
pub fn ssim_flagged(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, bool)> {
    same_shape(a, b)?;
    let (h, w, c) = a.hwc()?;
    let mut total = 0.0;
    let mut fallback = false;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let (v, f) = ssim_plane(&pa, &pb, h, w);
        total += v;
        fallback |= f;
    }
    Ok((total / c as f64, fallback))
}

/// Gaussian-window SSIM (11x11, sigma 1.5, L = 1), averaged over channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    ssim_flagged(a, b).map(|(v, _)| v)
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {}", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: usize,
    pub ssim: f64,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    /// Index into the ground-truth batch of the best match.
    pub matched_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub per_class: Vec<ClassScore>,
    pub max_ssim: f64,
    pub avg_ssim: f64,
    #[serde(with = "inf_as_string")]
    pub max_psnr: f64,
    #[serde(with = "inf_as_string")]
    pub avg_psnr: f64,
    /// Recovered labels with no ground-truth sample; excluded from the averages.
    pub unmatched: Vec<usize>,
    pub ssim_global_fallback: bool,
}

/// Bring a reconstruction to the ground-truth resolution: nearest upsampling
/// when coarser, box averaging when finer.
pub fn match_resolution(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw, c) = image.hwc()?;
    if (ih, iw) == (h, w) {
        return Ok(image.clone());
    }
    if ih <= h && iw <= w {
        return resize_nearest(image, h, w);
    }
    let mut out = Tensor::zeros(vec![h, w, c]);
    for y in 0..h {
        let (y0, y1) = (y * ih / h, ((y + 1) * ih / h).max(y * ih / h + 1));
        for x in 0..w {
            let (x0, x1) = (x * iw / w, ((x + 1) * iw / w).max(x * iw / w + 1));
            for ch in 0..c {
                let mut s = 0.0f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += image.at(yy, xx, ch) as f64;
                    }
                }
                out.set(y, x, ch, (s / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    Ok(out)
}

/// Score per-class recoveries against the batch: each class is compared with
/// its best-SSIM ground-truth sample of the same label.
pub fn score_batch(recoveries: &[(usize, Tensor<f32>)], batch: &[LabeledImage]) -> Result<BatchScore> {
    let mut score = BatchScore::default();
    for (label, image) in recoveries {
        let mut best: Option<ClassScore> = None;
        for (i, gt) in batch.iter().enumerate().filter(|(_, g)| g.label == *label) {
            let (h, w, _) = gt.image.hwc()?;
            let rec = match_resolution(image, h, w)?;
            let (s, fallback) = ssim_flagged(&rec, &gt.image)?;
            score.ssim_global_fallback |= fallback;
            if best.as_ref().is_none_or(|b| s > b.ssim) {
                best = Some(ClassScore {
                    label: *label,
                    ssim: s,
                    psnr: psnr(&rec, &gt.image)?,
                    matched_index: i,
                });
            }
        }
        match best {
            Some(b) => score.per_class.push(b),
            None => score.unmatched.push(*label),
        }
    }
    let n = score.per_class.len();
    if n > 0 {
        score.max_ssim = score.per_class.iter().map(|c| c.ssim).fold(f64::NEG_INFINITY, f64::max);
        score.avg_ssim = score.per_class.iter().map(|c| c.ssim).sum::<f64>() / n as f64;
        score.max_psnr = score.per_class.iter().map(|c| c.psnr).fold(f64::NEG_INFINITY, f64::max);
        score.avg_psnr = score.per_class.iter().map(|c| c.psnr).sum::<f64>() / n as f64;
    }
    Ok(score)
}
