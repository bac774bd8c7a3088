//! How much one sample's gradient reveals through a batch sum.
//!
//! Per-sample gradients are modelled as i.i.d. standard Gaussians, so
//! I(g1; g1 + ... + gK) = 0.5 * ln(K / (K - 1)) nats per dimension.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::rng::{seeded, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakagePoint {
    pub k: usize,
    /// Nats per dimension.
    pub closed_form: f64,
    pub sampled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageCurve {
    pub points: Vec<LeakagePoint>,
    /// Least-squares slope of ln(leakage) against ln(K).
    pub closed_form_slope: f64,
    pub sampled_slope: f64,
}

pub fn closed_form_leakage(k: usize) -> f64 {
    0.5 * (1.0 + 1.0 / (k as f64 - 1.0)).ln()
}

/// Fits both curves over the given batch sizes. The sampled estimate draws
/// `trials` batches of `dims`-dimensional gradients, measures the sample
/// correlation between g1 and the sum in every dimension, and averages
/// -0.5 * ln(1 - rho^2) over dimensions.
pub fn leakage_decay_experiment(dims: usize, ks: &[usize], trials: usize, seed: u64) -> Result<LeakageCurve> {
    if ks.is_empty() || ks.iter().any(|&k| k < 2) {
        return Err(MkorError::InvalidConfig("batch sizes must all be at least 2".into()));
    }
    if dims == 0 || trials < 3 {
        return Err(MkorError::InvalidConfig("need dims >= 1 and trials >= 3".into()));
    }
    let mut rng = seeded(seed, Stream::Leakage);
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut sampled = 0.0;
        for _ in 0..dims {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..trials {
                let g1: f64 = StandardNormal.sample(&mut rng);
                let mut sum = g1;
                for _ in 1..k {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sum += g;
                }
                sx += g1;
                sy += sum;
                sxx += g1 * g1;
                syy += sum * sum;
                sxy += g1 * sum;
            }
            let n = trials as f64;
            let cov = sxy / n - sx * sy / (n * n);
            let vx = sxx / n - sx * sx / (n * n);
            let vy = syy / n - sy * sy / (n * n);
            let rho2 = (cov * cov / (vx * vy)).min(1.0 - 1e-12);
            sampled += -0.5 * (1.0 - rho2).ln();
        }
        points.push(LeakagePoint {
            k,
            closed_form: closed_form_leakage(k),
            sampled: sampled / dims as f64,
        });
    }
    let closed_form_slope = loglog_slope(points.iter().map(|p| (p.k, p.closed_form)));
    let sampled_slope = loglog_slope(points.iter().map(|p| (p.k, p.sampled)));
    Ok(LeakageCurve {
        points,
        closed_form_slope,
        sampled_slope,
    })
}

fn loglog_slope(points: impl Iterator<Item = (usize, f64)>) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .filter(|&(_, v)| v > 0.0)
        .map(|(k, v)| ((k as f64).ln(), v.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
