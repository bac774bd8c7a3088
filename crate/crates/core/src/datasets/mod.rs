//! Dataset ingestion, synthetic images and batch assembly.

pub mod idx;
pub mod netpbm;
pub mod resize;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

pub use idx::{cifar100_dir, load_cifar100, load_mnist, load_mnist_dir, mnist_dir};
pub use resize::{resize_nearest, upscale_bilinear, UpscaleInverse};

/// An image in [0,1] with a 1-based class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One image for each of K distinct classes.
    Unique,
    /// K i.i.d. draws from the class distribution.
    Random,
    /// K i.i.d. draws from a random subset of `n_max` classes.
    Capped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub regime: Regime,
    pub size: usize,
    #[serde(default)]
    pub n_max: Option<usize>,
    /// Class distribution for the random regime, indexed by label - 1. Uniform if absent.
    #[serde(default)]
    pub class_probs: Option<Vec<f64>>,
    pub seed: u64,
}

impl BatchSpec {
    pub fn unique(size: usize, seed: u64) -> Self {
        BatchSpec {
            regime: Regime::Unique,
            size,
            n_max: None,
            class_probs: None,
            seed,
        }
    }

    pub fn random(size: usize, seed: u64) -> Self {
        BatchSpec {
            regime: Regime::Random,
            ..BatchSpec::unique(size, seed)
        }
    }

    pub fn capped(size: usize, n_max: usize, seed: u64) -> Self {
        BatchSpec {
            regime: Regime::Capped,
            n_max: Some(n_max),
            ..BatchSpec::unique(size, seed)
        }
    }
}

fn by_class(data: &[LabeledImage]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in data.iter().enumerate() {
        map.entry(item.label).or_default().push(i);
    }
    map
}

/// Assemble a batch. Deterministic under (data, spec).
pub fn make_batch(data: &[LabeledImage], spec: &BatchSpec) -> Result<Vec<LabeledImage>> {
    if spec.size == 0 {
        return Err(MkorError::InvalidConfig("batch size must be positive".into()));
    }
    let groups = by_class(data);
    let classes: Vec<usize> = groups.keys().copied().collect();
    if classes.is_empty() {
        return Err(MkorError::Unsatisfiable("empty dataset".into()));
    }
    let mut rng = seeded(spec.seed, Stream::Batch);
    let pick = |class: usize, rng: &mut ChaCha8Rng| {
        let members = &groups[&class];
        data[members[rng.random_range(0..members.len())]].clone()
    };
    match spec.regime {
        Regime::Unique => {
            if spec.size > classes.len() {
                return Err(MkorError::Unsatisfiable(format!(
                    "unique batch of {} needs {} classes, data has {}",
                    spec.size,
                    spec.size,
                    classes.len()
                )));
            }
            let chosen = sample(&mut rng, classes.len(), spec.size).into_vec();
            Ok(chosen.into_iter().map(|i| pick(classes[i], &mut rng)).collect())
        }
        Regime::Random => {
            let weights = match &spec.class_probs {
                None => vec![1.0 / classes.len() as f64; classes.len()],
                Some(p) => {
                    let total: f64 = p.iter().sum();
                    if p.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-6 {
                        return Err(MkorError::InvalidConfig("class_probs must be a distribution".into()));
                    }
                    classes.iter().map(|&c| p.get(c - 1).copied().unwrap_or(0.0)).collect()
                }
            };
            let cdf: Vec<f64> = weights
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w;
                    Some(*acc)
                })
                .collect();
            let total = *cdf.last().unwrap();
            if total <= 0.0 {
                return Err(MkorError::Unsatisfiable(
                    "no probability mass on present classes".into(),
                ));
            }
            Ok((0..spec.size)
                .map(|_| {
                    let u = rng.random::<f64>() * total;
                    let i = cdf.iter().position(|&c| u < c).unwrap_or(classes.len() - 1);
                    pick(classes[i], &mut rng)
                })
                .collect())
        }
        Regime::Capped => {
            let n_max = spec
                .n_max
                .filter(|&n| n > 0)
                .ok_or_else(|| MkorError::InvalidConfig("capped regime needs n_max >= 1".into()))?;
            let subset: Vec<usize> = sample(&mut rng, classes.len(), n_max.min(classes.len()))
                .into_iter()
                .map(|i| classes[i])
                .collect();
            Ok((0..spec.size)
                .map(|_| {
                    let c = subset[rng.random_range(0..subset.len())];
                    pick(c, &mut rng)
                })
                .collect())
        }
    }
}

/// Smooth class-keyed images: each class owns 2-4 Gaussian blobs whose
/// positions jitter slightly from image to image.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(num_classes * per_class);
    for class in 1..=num_classes {
        let mut crng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64);
        let blobs = crng.random_range(2..=4);
        let proto: Vec<(f64, f64, f64, Vec<f64>)> = (0..blobs)
            .map(|_| {
                let cy = crng.random_range(0.15..0.85) * h as f64;
                let cx = crng.random_range(0.15..0.85) * w as f64;
                let s = crng.random_range(0.12..0.3) * h.max(w) as f64;
                let amp = (0..c).map(|_| crng.random_range(-0.5..0.7)).collect();
                (cy, cx, s, amp)
            })
            .collect();
        let base: Vec<f64> = (0..c).map(|_| crng.random_range(0.3..0.6)).collect();
        for _ in 0..per_class {
            let jitter = 0.05 * h.max(w) as f64;
            let placed: Vec<(f64, f64, f64, &Vec<f64>)> = proto
                .iter()
                .map(|(cy, cx, s, amp)| {
                    (
                        cy + crng.random_range(-jitter..=jitter),
                        cx + crng.random_range(-jitter..=jitter),
                        *s,
                        amp,
                    )
                })
                .collect();
            let mut raw = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut v = base[ch];
                        for (cy, cx, s, amp) in &placed {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            v += amp[ch] * (-d2 / (2.0 * s * s)).exp();
                        }
                        raw.push(v);
                    }
                }
            }
            // affine squeeze into [0,1] around a mean kept in [0.2, 0.8]; no clipping
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let target = mean.clamp(0.2, 0.8);
            let spread = raw.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
            let scale = if spread > 0.0 {
                (target.min(1.0 - target) / spread).min(1.0)
            } else {
                1.0
            };
            let data = raw
                .iter()
                .map(|v| (target + (v - mean) * scale).clamp(0.0, 1.0) as f32)
                .collect();
            let img = Tensor::new(vec![h, w, c], data).expect("shape matches data");
            out.push(LabeledImage {
                image: img,
                label: class,
            });
        }
    }
    out
}

/// Load `<dir>/<label>/*.pgm|*.ppm`, where each subdirectory name is a 1-based label.
pub fn load_image_folder(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let read_dir = |d: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .map_err(|e| MkorError::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    if !dir.is_dir() {
        return Err(MkorError::DatasetUnavailable(dir.display().to_string()));
    }
    let mut out = Vec::new();
    for sub in read_dir(dir)? {
        let Some(label) = sub
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&l| l > 0 && sub.is_dir())
        else {
            continue;
        };
        for file in read_dir(&sub)? {
            match file.extension().and_then(|e| e.to_str()) {
                Some("pgm") | Some("ppm") => out.push(LabeledImage {
                    image: netpbm::read_image(&file)?,
                    label,
                }),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Number of classes implied by the largest label.
pub fn class_count(data: &[LabeledImage]) -> usize {
    data.iter().map(|d| d.label).max().unwrap_or(0)
}

/// Zero every pixel within `px` of the image edge.
pub fn zero_border(image: &mut Tensor<f32>, px: usize) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    for y in 0..h {
        for x in 0..w {
            if y < px || x < px || y + px >= h || x + px >= w {
                for ch in 0..c {
                    image.set(y, x, ch, 0.0);
                }
            }
        }
    }
    Ok(())
}
