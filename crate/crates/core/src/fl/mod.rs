//! One client's side of a federated round, defenses, audits and the full attack.

pub mod audit;
pub mod leakage;
pub mod pipeline;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImage;
use crate::error::{MkorError, Result};
use crate::nn::engine::loss_and_gradient;
use crate::nn::model::ModelSpec;
use crate::nn::params::{GradientUpdate, ParamSet};
use crate::rng::{seeded, Stream};

pub use audit::{audit, AuditReport, LayerAudit};
pub use leakage::{leakage_decay_experiment, LeakageCurve};
pub use pipeline::{run_attack, AttackConfig, ReconstructionReport};

/// What the relative noise std is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// RMS of the whole clean summed gradient.
    #[default]
    GlobalRms,
    /// RMS of each parameter block (weight or bias of one layer).
    LayerRms,
    /// Magnitude of each element.
    Elementwise,
}

impl NoiseScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global-rms" => Ok(NoiseScale::GlobalRms),
            "layer-rms" => Ok(NoiseScale::LayerRms),
            "elementwise" => Ok(NoiseScale::Elementwise),
            _ => Err(MkorError::InvalidConfig(format!("unknown noise scale {:?}", s))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Per-sample L2 clipping norm.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Noise std relative to the scale chosen by `noise_scale`.
    #[serde(default)]
    pub sigma_dp: Option<f64>,
    #[serde(default)]
    pub noise_scale: NoiseScale,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(MkorError::InvalidConfig("clip norm must be positive".into()));
        }
        if self.sigma_dp.is_some_and(|s| !(s >= 0.0)) {
            return Err(MkorError::InvalidConfig("sigma_dp must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    /// L2 norm of each per-sample gradient before clipping.
    pub sample_norms: Vec<f64>,
    pub clipped: usize,
    pub mean_loss: f64,
    /// Std of the added noise per element (the largest one when it varies).
    pub noise_std: f64,
}

/// Summed (and possibly clipped / noised) batch gradient, the client's upload.
pub fn client_update(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    batch: &[LabeledImage],
    defense: &DefenseConfig,
    threads: usize,
) -> Result<GradientUpdate<f32>> {
    client_update_with_stats(spec, params, batch, defense, threads).map(|(u, _)| u)
}

/// Per-sample gradients are computed `threads` at a time but always added in
/// batch order, so the result does not depend on the thread count.
pub fn client_update_with_stats(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    batch: &[LabeledImage],
    defense: &DefenseConfig,
    threads: usize,
) -> Result<(GradientUpdate<f32>, ClientStats)> {
    if batch.is_empty() {
        return Err(MkorError::InvalidConfig("empty batch".into()));
    }
    defense.validate()?;
    params.check_layout(spec)?;
    let threads = threads.max(1);
    let mut total = ParamSet::zeros(&spec.layout);
    let mut stats = ClientStats::default();
    let mut loss_sum = 0.0;
    for wave in batch.chunks(threads) {
        let results: Vec<Result<(f64, ParamSet<f32>)>> = if wave.len() == 1 {
            vec![loss_and_gradient(spec, params, &wave[0].image, wave[0].label)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|item| s.spawn(move || loss_and_gradient(spec, params, &item.image, item.label)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };
        for r in results {
            let (loss, mut g) = r?;
            loss_sum += loss;
            let norm = g.l2_norm();
            stats.sample_norms.push(norm);
            if let Some(c) = defense.clip {
                if norm > c {
                    g.scale((c / norm) as f32);
                    stats.clipped += 1;
                }
            }
            total.add_assign(&g)?;
        }
    }
    stats.mean_loss = loss_sum / batch.len() as f64;
    if let Some(s) = defense.sigma_dp.filter(|&s| s > 0.0) {
        stats.noise_std = add_noise(&mut total, s, defense.noise_scale, defense.seed);
    }
    Ok((
        GradientUpdate {
            grads: total,
            batch_size: batch.len(),
        },
        stats,
    ))
}

fn rms(v: &[f32]) -> f64 {
    (v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Adds N(0, (sigma * scale)^2) to every element and returns the largest std used.
fn add_noise(total: &mut ParamSet<f32>, sigma: f64, scale: NoiseScale, seed: u64) -> f64 {
    let mut rng = seeded(seed, Stream::Defense);
    let mut draw = |v: &mut f32, std: f64| {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + std * e) as f32;
    };
    let mut max_std = 0.0f64;
    match scale {
        NoiseScale::GlobalRms => {
            let std = sigma * rms(&total.values);
            max_std = std;
            total.values.iter_mut().for_each(|v| draw(v, std));
        }
        NoiseScale::LayerRms => {
            for e in total.layout.entries.clone() {
                let block = &mut total.values[e.range()];
                let std = sigma * rms(block);
                max_std = max_std.max(std);
                block.iter_mut().for_each(|v| draw(v, std));
            }
        }
        NoiseScale::Elementwise => {
            for v in total.values.iter_mut() {
                let std = sigma * (*v as f64).abs();
                max_std = max_std.max(std);
                draw(v, std);
            }
        }
    }
    max_std
}
