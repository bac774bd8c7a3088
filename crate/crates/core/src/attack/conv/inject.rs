//! Writing a [`ConvPlan`] into conv parameters.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::conv::plan::ConvPlan;
use crate::error::{MkorError, Result};
use crate::nn::model::{Activation, Layer, ModelSpec};
use crate::nn::params::ParamSet;
use crate::rng::{seeded, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvInjectConfig {
    /// Per-layer scale of the plan filters; keeps the plan's own values when absent.
    pub beta: Option<f64>,
    /// Std of the values replacing non-edge weights between considered channels.
    pub sigma: f64,
    /// Reference weights already within `keep_band * sigma` of zero are left as they are.
    pub keep_band: f64,
    /// Drive unplanned channels that feed later convs to zero through their bias.
    pub silence_unplanned: bool,
    pub seed: u64,
}

impl Default for ConvInjectConfig {
    fn default() -> Self {
        ConvInjectConfig {
            beta: None,
            sigma: 1e-3,
            keep_band: 3.0,
            silence_unplanned: true,
            seed: 0,
        }
    }
}

struct Geometry {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

fn geometry(spec: &ModelSpec, layer: usize) -> Result<Geometry> {
    match spec.layers.get(layer) {
        Some(Layer::Conv {
            in_ch, out_ch, kernel, ..
        }) => Ok(Geometry {
            in_ch: *in_ch,
            out_ch: *out_ch,
            kernel: *kernel,
        }),
        _ => Err(MkorError::InvalidConfig(format!("plan layer {} is not a conv", layer))),
    }
}

fn check_plan(spec: &ModelSpec, plan: &ConvPlan) -> Result<()> {
    if plan.model != spec.name || plan.input_shape != spec.input_shape {
        return Err(MkorError::InvalidConfig(format!(
            "plan built for {} does not match model {}",
            plan.model, spec.name
        )));
    }
    for lp in &plan.layers {
        let g = geometry(spec, lp.layer)?;
        if lp.edges.iter().any(|e| e.from >= g.in_ch || e.to >= g.out_ch) {
            return Err(MkorError::InvalidConfig(format!(
                "plan edge outside layer {}",
                lp.layer
            )));
        }
    }
    Ok(())
}

fn tap_index(g: &Geometry, to: usize, role: crate::attack::conv::plan::FilterRole, from: usize) -> usize {
    let c = (g.kernel / 2) as i64;
    let (dy, dx) = role.offset();
    let ky = (c + dy) as usize;
    let kx = (c + dx) as usize;
    ((to * g.kernel + ky) * g.kernel + kx) * g.in_ch + from
}

/// Plan kernels on the edges, every other conv parameter zero.
pub fn inject_conv_naive(spec: &ModelSpec, params: &ParamSet<f32>, plan: &ConvPlan) -> Result<ParamSet<f32>> {
    params.check_layout(spec)?;
    check_plan(spec, plan)?;
    let mut out = params.clone();
    let mut scale = 1.0;
    for lp in &plan.layers {
        let g = geometry(spec, lp.layer)?;
        scale *= lp.beta;
        let (w, b) = out.weight_bias_mut(lp.layer)?;
        w.fill(0.0);
        let mut b = b;
        if let Some(b) = b.as_deref_mut() {
            b.fill(0.0);
        }
        for e in &lp.edges {
            w[tap_index(&g, e.to, e.role, e.from)] = (lp.beta * e.role.weight()) as f32;
            if let Some(b) = b.as_deref_mut() {
                b[e.to] = (scale * e.role.bias()) as f32;
            }
        }
    }
    Ok(out)
}

/// Plan kernels scaled by beta on the edges and small noise on the other
/// weights between considered channels. Parameters outside that block keep
/// their values, except that the biases of unplanned channels which feed a
/// later conv are pushed low enough to switch those channels off.
///
/// Returns the parameters and the plan with the betas that were used.
pub fn inject_conv_inconspicuous(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    plan: &ConvPlan,
    cfg: &ConvInjectConfig,
) -> Result<(ParamSet<f32>, ConvPlan)> {
    params.check_layout(spec)?;
    check_plan(spec, plan)?;
    let plan = match cfg.beta {
        Some(b) => plan.clone().with_beta(b),
        None => plan.clone(),
    };
    if cfg.sigma < 0.0 || plan.layers.iter().any(|l| l.beta <= 0.0) {
        return Err(MkorError::InvalidConfig(
            "conv injection needs sigma >= 0 and beta > 0".into(),
        ));
    }
    let noise = Normal::new(0.0, cfg.sigma).expect("non-negative sigma");
    let mut rng = seeded(cfg.seed, Stream::ConvInjection);
    let mut out = params.clone();
    let band = cfg.keep_band * cfg.sigma;
    let last = plan.layers.len().saturating_sub(1);
    // bound on considered activations entering the current layer
    let mut in_bound = 1.0f64;
    let mut scale = 1.0f64;
    for (pos, lp) in plan.layers.iter().enumerate() {
        let g = geometry(spec, lp.layer)?;
        let lp_beta = lp.beta;
        scale *= lp_beta;
        let kk = g.kernel * g.kernel;
        let (w, b) = out.weight_bias_mut(lp.layer)?;
        let mut b = b;
        for &to in &lp.outputs {
            for &from in &lp.inputs {
                for t in 0..kk {
                    let idx = (to * kk + t) * g.in_ch + from;
                    if cfg.sigma == 0.0 || (w[idx] as f64).abs() > band {
                        w[idx] = noise.sample(&mut rng) as f32;
                    }
                }
            }
        }
        for e in &lp.edges {
            // the edge kernel is exact: clear the whole slice first
            for t in 0..kk {
                w[(e.to * kk + t) * g.in_ch + e.from] = 0.0;
            }
            w[tap_index(&g, e.to, e.role, e.from)] = (lp_beta * e.role.weight()) as f32;
            if let Some(b) = b.as_deref_mut() {
                b[e.to] = (scale * e.role.bias()) as f32;
            }
        }
        if cfg.silence_unplanned && pos < last {
            if let Some(b) = b.as_deref_mut() {
                let margin = match plan.activation {
                    Activation::Relu => 1.0,
                    Activation::Sigmoid => 30.0,
                };
                let bound = match plan.activation {
                    Activation::Relu => in_bound,
                    Activation::Sigmoid => 1.0,
                };
                for o in 0..g.out_ch {
                    if lp.outputs.contains(&o) {
                        continue;
                    }
                    let mass: f64 = (0..kk)
                        .flat_map(|t| (0..g.in_ch).map(move |c| (t, c)))
                        .map(|(t, c)| (w[(o * kk + t) * g.in_ch + c] as f64).abs())
                        .sum();
                    b[o] = (-(mass * bound) - margin) as f32;
                }
            }
        }
        in_bound = scale;
    }
    Ok((out, plan))
}
