//! Malicious FC classifier parameters that give every class its own gradient
//! path, and recovery of the classifier input from the summed gradient.
//!
//! Softmax cross-entropy spreads every sample's gradient over all logits, so
//! a single "sink" output is given a large bias: each other logit's gradient
//! then comes (to within e^-bias) only from samples of its own class. The sink
//! class itself is not recoverable.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::nn::model::{Activation, Layer, ModelSpec};
use crate::nn::params::{GradientUpdate, ParamSet};
use crate::rng::{seeded, Stream};

/// K * sum_n p_n (1 - p_n)^(K-1): the expected number of classes drawn exactly once.
pub fn expected_unique_count(k: usize, p: &[f64]) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if k == 0 || p.is_empty() || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (total - 1.0).abs() > 1e-9 {
        return Err(MkorError::InvalidConfig(
            "expected_unique_count needs K >= 1 and a distribution".into(),
        ));
    }
    Ok(k as f64 * p.iter().map(|&pn| pn * (1.0 - pn).powi(k as i32 - 1)).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    Naive,
    Inconspicuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkConfig {
    /// 1-based sink label; drawn from the seed when absent.
    pub class: Option<usize>,
    pub bias: f64,
}

impl Default for SinkConfig {
    fn default() -> Self {
        SinkConfig {
            class: None,
            bias: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcInjectConfig {
    pub alpha_range: (f64, f64),
    /// Std of the replacement values on touched rows and columns.
    pub sigma: f64,
    /// Optional extra perturbation of the chain parameters.
    pub jitter: Option<f64>,
    pub sink: Option<SinkConfig>,
    /// Shared chain weight for bias-free classifiers.
    pub bias_free_weight: f64,
    pub seed: u64,
}

impl Default for FcInjectConfig {
    fn default() -> Self {
        FcInjectConfig {
            alpha_range: (-1.5, -0.5),
            sigma: 1e-12,
            jitter: None,
            sink: Some(SinkConfig::default()),
            bias_free_weight: 1.0,
            seed: 0,
        }
    }
}

/// Gradient path of one class through the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassChain {
    pub class: usize,
    /// First hidden layer node.
    pub primary: usize,
    /// Its negated twin (ReLU classifiers only).
    pub twin: Option<usize>,
    pub alpha: Option<f64>,
    /// Carried node in every later hidden layer.
    pub carried: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingMap {
    pub mode: InjectionMode,
    /// Model layer indices of the FC layers, first to last.
    pub fc_layers: Vec<usize>,
    pub num_classes: usize,
    pub chains: Vec<ClassChain>,
    pub sink_class: Option<usize>,
    pub sink_bias: f64,
    /// Bias-free classifier: recoveries carry an unknown scale.
    pub unnormalized: bool,
    pub bias_free_weight: f64,
    pub seed: u64,
}

impl DecouplingMap {
    pub fn layer_count(&self) -> usize {
        self.fc_layers.len()
    }

    pub fn chain(&self, class: usize) -> Option<&ClassChain> {
        self.chains.iter().find(|c| c.class == class)
    }
}

struct Classifier {
    layers: Vec<usize>,
    widths: Vec<usize>,
    hidden_act: Activation,
}

fn classifier(spec: &ModelSpec) -> Result<Classifier> {
    let layers = spec.fc_layers();
    if layers.len() < 2 {
        return Err(MkorError::InvalidConfig(
            "classifier needs at least two FC layers".into(),
        ));
    }
    let mut widths = Vec::new();
    for &l in &layers {
        let Layer::Fc {
            in_features,
            out_features,
        } = spec.layers[l]
        else {
            unreachable!()
        };
        if widths.is_empty() {
            widths.push(in_features);
        }
        widths.push(out_features);
    }
    let hidden_act = spec
        .activation_after(layers[0])
        .ok_or_else(|| MkorError::InvalidConfig("first FC layer has no activation".into()))?;
    Ok(Classifier {
        layers,
        widths,
        hidden_act,
    })
}

fn plan_chains(
    spec: &ModelSpec,
    cfg: &FcInjectConfig,
    twins: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Classifier, Vec<ClassChain>, Option<usize>)> {
    let cls = classifier(spec)?;
    let n = spec.num_classes();
    // a sink needs an output bias
    let sink = match cfg.sink.as_ref().filter(|_| spec.fc_bias) {
        None => None,
        Some(s) => {
            let c = s.class.unwrap_or_else(|| rng.random_range(1..=n));
            if c == 0 || c > n {
                return Err(MkorError::InvalidLabel { label: c, classes: n });
            }
            Some(c)
        }
    };
    let classes: Vec<usize> = (1..=n).filter(|&c| Some(c) != sink).collect();
    let per_class = if twins { 2 } else { 1 };
    let need = per_class * classes.len();
    if cls.widths[1] < need {
        return Err(MkorError::InvalidConfig(format!(
            "first hidden layer has {} nodes, {} needed",
            cls.widths[1], need
        )));
    }
    let first = sample(rng, cls.widths[1], need).into_vec();
    let mut carried: Vec<Vec<usize>> = Vec::new();
    for &w in &cls.widths[2..cls.widths.len() - 1] {
        if w < classes.len() {
            return Err(MkorError::InvalidConfig(format!(
                "hidden layer has {} nodes, {} needed",
                w,
                classes.len()
            )));
        }
        carried.push(sample(rng, w, classes.len()).into_vec());
    }
    let (lo, hi) = cfg.alpha_range;
    if twins && !(lo <= hi && hi < 0.0) {
        return Err(MkorError::InvalidConfig("alpha range must be negative".into()));
    }
    let chains = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| ClassChain {
            class,
            primary: first[per_class * i],
            twin: twins.then(|| first[per_class * i + 1]),
            alpha: twins.then(|| if lo == hi { lo } else { rng.random_range(lo..=hi) }),
            carried: carried.iter().map(|c| c[i]).collect(),
        })
        .collect();
    Ok((cls, chains, sink))
}

/// Node feeding layer `l` (1-based position in the classifier, l >= 2) for a chain.
fn sources(chain: &ClassChain, l: usize) -> Vec<usize> {
    if l == 2 {
        std::iter::once(chain.primary).chain(chain.twin).collect()
    } else {
        vec![chain.carried[l - 3]]
    }
}

/// Node a chain occupies at classifier layer `l` (l >= 2).
fn target(chain: &ClassChain, l: usize, layers: usize) -> usize {
    if l == layers {
        chain.class - 1
    } else {
        chain.carried[l - 2]
    }
}

fn make_map(
    mode: InjectionMode,
    spec: &ModelSpec,
    cls: &Classifier,
    chains: Vec<ClassChain>,
    sink: Option<usize>,
    cfg: &FcInjectConfig,
) -> DecouplingMap {
    DecouplingMap {
        mode,
        fc_layers: cls.layers.clone(),
        num_classes: spec.num_classes(),
        chains,
        sink_class: sink,
        sink_bias: cfg.sink.as_ref().map(|s| s.bias).unwrap_or(0.0),
        unnormalized: !spec.fc_bias,
        bias_free_weight: cfg.bias_free_weight,
        seed: cfg.seed,
    }
}

/// Zero the classifier except for one positive chain per class.
pub fn inject_fc_naive(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    cfg: &FcInjectConfig,
) -> Result<(ParamSet<f32>, DecouplingMap)> {
    params.check_layout(spec)?;
    let mut rng = seeded(cfg.seed, Stream::FcInjection);
    let (cls, chains, sink) = plan_chains(spec, cfg, false, &mut rng)?;
    let mut out = params.clone();
    let big_l = cls.layers.len();
    let shared = cfg.bias_free_weight as f32;
    for (pos, &layer) in cls.layers.iter().enumerate() {
        let l = pos + 1;
        let cols = cls.widths[pos];
        let reference_w = params.weight(layer)?;
        let reference_b = params.bias(layer).map(|b| b.to_vec());
        let (w, b) = out.weight_bias_mut(layer)?;
        w.fill(0.0);
        let mut b = b;
        if let Some(b) = b.as_deref_mut() {
            b.fill(0.0);
        }
        let weight = |v: f32| if spec.fc_bias { v.abs() } else { shared };
        for ch in &chains {
            if l == 1 {
                let r = ch.primary;
                for (dst, src) in w[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .zip(&reference_w[r * cols..(r + 1) * cols])
                {
                    *dst = weight(*src);
                }
                if let (Some(b), Some(rb)) = (b.as_deref_mut(), &reference_b) {
                    b[r] = rb[r].abs();
                }
            } else {
                let r = target(ch, l, big_l);
                for s in sources(ch, l) {
                    w[r * cols + s] = weight(reference_w[r * cols + s]);
                }
                if let (Some(b), Some(rb)) = (b.as_deref_mut(), &reference_b) {
                    b[r] = rb[r].abs();
                }
            }
        }
        if l == big_l {
            if let (Some(b), Some(s)) = (b, sink) {
                b[s - 1] = cfg.sink.as_ref().map(|s| s.bias).unwrap_or(0.0) as f32;
            }
        }
    }
    Ok((out, make_map(InjectionMode::Naive, spec, &cls, chains, sink, cfg)))
}

/// Twin rows, positive merging weights and non-negative carried biases; all
/// other classifier parameters are left untouched.
pub fn inject_fc_inconspicuous(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    cfg: &FcInjectConfig,
) -> Result<(ParamSet<f32>, DecouplingMap)> {
    params.check_layout(spec)?;
    let mut rng = seeded(cfg.seed, Stream::FcInjection);
    let cls = classifier(spec)?;
    let twins = cls.hidden_act == Activation::Relu;
    let (cls, chains, sink) = plan_chains(spec, cfg, twins, &mut rng)?;
    if cfg.sigma < 0.0 {
        return Err(MkorError::InvalidConfig("sigma must be non-negative".into()));
    }
    let noise = Normal::new(0.0, cfg.sigma).expect("non-negative sigma");
    let jitter = cfg.jitter.map(|j| Normal::new(0.0, j).expect("non-negative jitter"));
    let perturb = |v: f64, rng: &mut ChaCha8Rng| v + jitter.map(|j| j.sample(rng)).unwrap_or(0.0);
    let mut out = params.clone();
    let big_l = cls.layers.len();
    let shared = cfg.bias_free_weight;

    for (pos, &layer) in cls.layers.iter().enumerate() {
        let l = pos + 1;
        let cols = cls.widths[pos];
        let reference_w = params.weight(layer)?.to_vec();
        let reference_b = params.bias(layer).map(|b| b.to_vec());
        let relu_after = l < big_l && spec.activation_after(layer) == Some(Activation::Relu);
        let (w, mut b) = out.weight_bias_mut(layer)?;
        if l == 1 {
            for ch in &chains {
                let (Some(t), Some(alpha)) = (ch.twin, ch.alpha) else {
                    continue;
                };
                let p = ch.primary;
                for i in 0..cols {
                    w[t * cols + i] = perturb(alpha * reference_w[p * cols + i] as f64, &mut rng) as f32;
                }
                if let (Some(b), Some(rb)) = (b.as_deref_mut(), &reference_b) {
                    b[t] = perturb(alpha * rb[p] as f64, &mut rng) as f32;
                }
            }
            continue;
        }
        let rows = cls.widths[l];
        for ch in &chains {
            let r = target(ch, l, big_l);
            let srcs = sources(ch, l);
            for &s in &srcs {
                for row in 0..rows {
                    w[row * cols + s] = if row == r {
                        let v = if spec.fc_bias {
                            (reference_w[row * cols + s] as f64).abs()
                        } else {
                            shared
                        };
                        perturb(v, &mut rng).abs() as f32
                    } else {
                        noise.sample(&mut rng) as f32
                    };
                }
            }
            if relu_after {
                // keep the carried node alive: only its own chain feeds it
                for c in 0..cols {
                    if !srcs.contains(&c) {
                        w[r * cols + c] = noise.sample(&mut rng) as f32;
                    }
                }
            }
            if let (Some(b), Some(rb)) = (b.as_deref_mut(), &reference_b) {
                b[r] = perturb((rb[r] as f64).abs(), &mut rng).abs() as f32;
            }
        }
        if l == big_l {
            if let (Some(b), Some(s)) = (b, sink) {
                b[s - 1] = cfg.sink.as_ref().map(|s| s.bias).unwrap_or(0.0) as f32;
            }
        }
    }
    Ok((
        out,
        make_map(InjectionMode::Inconspicuous, spec, &cls, chains, sink, cfg),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecovery {
    pub class: usize,
    /// Recovered classifier input; empty when the class is absent.
    pub z: Vec<f32>,
    /// Bias gradient of the node used (row-gradient norm for bias-free models).
    pub denominator: f64,
    pub used_twin: bool,
    /// |d| of the other twin relative to the sum of both.
    pub twin_share: f64,
    pub present: bool,
    pub unnormalized: bool,
}

/// Per-class division of the first-layer row gradient by its bias gradient.
pub fn reconstruct_fc_inputs(
    grad: &GradientUpdate<f32>,
    map: &DecouplingMap,
    threshold: Option<f64>,
) -> Result<Vec<ClassRecovery>> {
    let layer = *map
        .fc_layers
        .first()
        .ok_or_else(|| MkorError::InvalidConfig("decoupling map without FC layers".into()))?;
    let w = grad.grads.weight(layer)?;
    let b = grad.grads.bias(layer);
    let entry = grad
        .grads
        .layout
        .find(layer, crate::nn::params::ParamRole::Weight)
        .ok_or_else(|| MkorError::LayoutMismatch("missing first FC weight".into()))?;
    let (rows, cols) = (entry.shape[0], entry.shape[1]);
    let row = |r: usize| -> Result<&[f32]> {
        if r >= rows {
            return Err(MkorError::LayoutMismatch(format!(
                "node {} outside layer of {}",
                r, rows
            )));
        }
        Ok(&w[r * cols..(r + 1) * cols])
    };
    let norm = |r: &[f32]| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let denom = |r: usize| -> Result<f64> {
        match b {
            Some(b) => Ok(b[r] as f64),
            None => Ok(norm(row(r)?)),
        }
    };
    let mut candidates = Vec::with_capacity(map.chains.len());
    for ch in &map.chains {
        let dp = denom(ch.primary)?;
        let dt = match ch.twin {
            Some(t) => denom(t)?,
            None => 0.0,
        };
        candidates.push((ch, dp, dt));
    }
    let max_d = candidates
        .iter()
        .map(|(_, dp, dt)| dp.abs().max(dt.abs()))
        .fold(0.0, f64::max);
    // absolute floor: a sink-only batch leaves rounding dust near 1e-20 elsewhere
    let eps = threshold.unwrap_or((1e-8 * max_d).max(1e-10));
    let mut out = Vec::with_capacity(candidates.len());
    for (ch, dp, dt) in candidates {
        let use_twin = dt.abs() > dp.abs();
        let (node, d, other) = match (use_twin, ch.twin) {
            (true, Some(t)) => (t, dt, dp),
            _ => (ch.primary, dp, dt),
        };
        let present = d.abs() >= eps && d != 0.0 && max_d > 0.0;
        let twin_share = if present {
            other.abs() / (d.abs() + other.abs())
        } else {
            0.0
        };
        let z = if !present {
            Vec::new()
        } else if map.unnormalized {
            // chain derivative of a ReLU path is -(shared weight)^(L-1)
            let scale = -map.bias_free_weight.powi(map.layer_count() as i32 - 1);
            row(node)?.iter().map(|&g| (g as f64 / scale) as f32).collect()
        } else {
            if d == 0.0 {
                return Err(MkorError::ZeroDenominator(ch.class));
            }
            row(node)?.iter().map(|&g| (g as f64 / d) as f32).collect()
        };
        out.push(ClassRecovery {
            class: ch.class,
            z,
            denominator: d,
            used_twin: use_twin && ch.twin.is_some(),
            twin_share,
            present,
            unnormalized: map.unnormalized,
        });
    }
    Ok(out)
}
