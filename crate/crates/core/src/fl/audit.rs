//! Checks a suspicious client can run on the parameters it receives.

use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::nn::params::{ParamRole, ParamSet};

pub const ZERO_FRACTION_LIMIT: f64 = 0.5;
pub const MODIFIED_FRACTION_LIMIT: f64 = 0.2;
pub const DOMINANCE_LIMIT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    /// Share of exactly-zero weights in the received layer.
    pub zero_fraction: f64,
    /// Share of weights and biases that differ from the reference.
    pub modified_fraction: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub layers: Vec<LayerAudit>,
    /// Largest single-sample share of the summed per-sample gradient norms.
    pub max_sample_share: Option<f64>,
    pub mean_sample_share: Option<f64>,
    pub peak_modified_fraction: f64,
    pub flags: Vec<String>,
}

impl AuditReport {
    pub fn flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Compare received parameters with a trusted reference and, optionally,
/// look at how the batch gradient splits over samples.
pub fn audit(reference: &ParamSet<f32>, received: &ParamSet<f32>, sample_norms: Option<&[f64]>) -> Result<AuditReport> {
    if reference.layout != received.layout {
        return Err(MkorError::LayoutMismatch(
            "reference and received parameters differ in layout".into(),
        ));
    }
    let mut layers: Vec<usize> = received.layout.entries.iter().map(|e| e.layer).collect();
    layers.dedup();
    let mut report = AuditReport::default();
    for layer in layers {
        let w = received.get(layer, ParamRole::Weight)?;
        let zero_fraction = w.iter().filter(|&&v| v == 0.0).count() as f64 / w.len().max(1) as f64;
        let mut total = 0usize;
        let mut modified = 0usize;
        for e in received.layout.entries.iter().filter(|e| e.layer == layer) {
            let a = &reference.values[e.range()];
            let b = &received.values[e.range()];
            total += a.len();
            modified += a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        }
        let modified_fraction = modified as f64 / total.max(1) as f64;
        let mut flagged = false;
        if zero_fraction > ZERO_FRACTION_LIMIT {
            report.flags.push(format!(
                "layer {}: {:.1}% of weights are zero",
                layer,
                100.0 * zero_fraction
            ));
            flagged = true;
        }
        if modified_fraction > MODIFIED_FRACTION_LIMIT {
            report.flags.push(format!(
                "layer {}: {:.1}% of parameters modified",
                layer,
                100.0 * modified_fraction
            ));
            flagged = true;
        }
        report.peak_modified_fraction = report.peak_modified_fraction.max(modified_fraction);
        report.layers.push(LayerAudit {
            layer,
            zero_fraction,
            modified_fraction,
            flagged,
        });
    }
    if let Some(norms) = sample_norms.filter(|n| !n.is_empty()) {
        let sum: f64 = norms.iter().sum();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let share = if sum > 0.0 { max / sum } else { 0.0 };
        report.max_sample_share = Some(share);
        report.mean_sample_share = Some(1.0 / norms.len() as f64);
        if share > DOMINANCE_LIMIT && norms.len() > 1 {
            report
                .flags
                .push(format!("one sample holds {:.1}% of the gradient norm", 100.0 * share));
        }
    }
    Ok(report)
}
