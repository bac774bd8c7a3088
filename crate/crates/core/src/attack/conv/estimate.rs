//! Turning recovered conv features back into an image.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attack::conv::plan::{region_of, ConvPlan, Polarity};
use crate::error::{MkorError, Result};
use crate::nn::model::{Activation, Layer, ModelSpec};
use crate::tensor::Tensor;

/// What to put in pixels no considered channel describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillMode {
    Zero,
    #[default]
    MidGray,
    /// Copy the closest described pixel (4-neighbour distance, ties to the first found).
    Nearest,
}

impl FillMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(FillMode::Zero),
            "mid-gray" | "midgray" => Ok(FillMode::MidGray),
            "nearest" => Ok(FillMode::Nearest),
            _ => Err(MkorError::InvalidConfig(format!("unknown fill mode {:?}", s))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Pixel-color entries with both an upper and a lower bound.
    pub both_bounds: usize,
    pub upper_only: usize,
    pub lower_only: usize,
    pub filled: usize,
    /// Entries whose upper bound came out below the lower bound by more than rounding.
    pub inverted: usize,
    /// Sigmoid inputs that had to be clamped before inversion.
    pub clamped: usize,
}

/// Bound crossings smaller than this are float rounding, not evidence of noise.
pub const INVERSION_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Estimate {
    pub image: Tensor<f32>,
    /// Per pixel (row-major): true when at least one channel described it.
    pub described: Vec<bool>,
    pub report: EstimateReport,
}

#[derive(Clone, Debug)]
pub struct Bounds {
    pub upper: Vec<Option<f64>>,
    pub lower: Vec<Option<f64>>,
}

fn check_z0(z0: &Tensor<f32>, plan: &ConvPlan) -> Result<()> {
    if z0.shape() != plan.output_shape {
        return Err(MkorError::ShapeMismatch(format!(
            "features {:?}, plan expects {:?}",
            z0.shape(),
            plan.output_shape
        )));
    }
    Ok(())
}

/// Per-pixel bounds implied by the recovered features, in HWC order of the input.
pub fn input_bounds(z0: &Tensor<f32>, plan: &ConvPlan) -> Result<Bounds> {
    check_z0(z0, plan)?;
    let [ih, iw, ic] = plan.input_shape;
    let [oh, ow, _] = plan.output_shape;
    let b = plan.beta_product();
    let mut upper = vec![None::<f64>; ih * iw * ic];
    let mut lower = vec![None::<f64>; ih * iw * ic];
    for fc in &plan.channels {
        for h in 0..oh {
            for w in 0..ow {
                let Some(r) = region_of(h, w, fc.channel, plan)? else {
                    continue;
                };
                let v = z0.at(h, w, fc.channel) as f64 / b;
                for y in r.rows.0..=r.rows.1 {
                    for x in r.cols.0..=r.cols.1 {
                        let i = (y * iw + x) * ic + r.color;
                        match r.polarity {
                            Polarity::Max => upper[i] = Some(upper[i].map_or(v, |u: f64| u.min(v))),
                            Polarity::Min => {
                                let l = 1.0 - v;
                                lower[i] = Some(lower[i].map_or(l, |u: f64| u.max(l)));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Bounds { upper, lower })
}

/// Midpoint of the tightest bounds per pixel, clamped to [0, 1]. A pixel with
/// one bound takes it directly; pixels with none are filled per `fill`.
pub fn estimate_input(z0: &Tensor<f32>, plan: &ConvPlan, fill: FillMode) -> Result<Estimate> {
    let bounds = input_bounds(z0, plan)?;
    let [ih, iw, ic] = plan.input_shape;
    let mut report = EstimateReport::default();
    let mut values = vec![None::<f64>; ih * iw * ic];
    for (i, v) in values.iter_mut().enumerate() {
        *v = match (bounds.upper[i], bounds.lower[i]) {
            (Some(u), Some(l)) => {
                report.both_bounds += 1;
                if u < l - INVERSION_TOLERANCE {
                    report.inverted += 1;
                }
                Some((u + l) / 2.0)
            }
            (Some(u), None) => {
                report.upper_only += 1;
                Some(u)
            }
            (None, Some(l)) => {
                report.lower_only += 1;
                Some(l)
            }
            (None, None) => None,
        };
    }
    Ok(finish(values, [ih, iw, ic], fill, report))
}

/// Writes filled values and builds the image.
fn finish(values: Vec<Option<f64>>, shape: [usize; 3], fill: FillMode, mut report: EstimateReport) -> Estimate {
    let [ih, iw, ic] = shape;
    let described: Vec<bool> = (0..ih * iw)
        .map(|p| (0..ic).any(|c| values[p * ic + c].is_some()))
        .collect();
    report.filled = values.iter().filter(|v| v.is_none()).count();
    let data = match fill {
        FillMode::Zero => values.iter().map(|v| v.unwrap_or(0.0)).collect::<Vec<_>>(),
        FillMode::MidGray => values.iter().map(|v| v.unwrap_or(0.5)).collect(),
        FillMode::Nearest => nearest_fill(&values, shape),
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Estimate {
        image: Tensor::new(vec![ih, iw, ic], data).expect("shape matches"),
        described,
        report,
    }
}

fn nearest_fill(values: &[Option<f64>], shape: [usize; 3]) -> Vec<f64> {
    let [ih, iw, ic] = shape;
    let mut out = vec![0.5; values.len()];
    for c in 0..ic {
        let mut src = vec![usize::MAX; ih * iw];
        let mut queue = VecDeque::new();
        for p in 0..ih * iw {
            if values[p * ic + c].is_some() {
                src[p] = p;
                queue.push_back(p);
            }
        }
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / iw, p % iw);
            let mut next = [None; 4];
            if y > 0 {
                next[0] = Some(p - iw);
            }
            if x > 0 {
                next[1] = Some(p - 1);
            }
            if x + 1 < iw {
                next[2] = Some(p + 1);
            }
            if y + 1 < ih {
                next[3] = Some(p + iw);
            }
            for q in next.into_iter().flatten() {
                if src[q] == usize::MAX {
                    src[q] = src[p];
                    queue.push_back(q);
                }
            }
        }
        for p in 0..ih * iw {
            if src[p] != usize::MAX {
                out[p * ic + c] = values[src[p] * ic + c].unwrap();
            }
        }
    }
    out
}

/// logit with inputs clamped to [delta, 1 - delta]; the flag reports a clamp.
pub fn inverse_sigmoid(y: f64, delta: f64) -> (f64, bool) {
    let clamped = y.clamp(delta, 1.0 - delta);
    ((clamped / (1.0 - clamped)).ln(), clamped != y)
}

pub const SIGMOID_DELTA: f64 = 1e-6;

/// Walks recovered features of a sigmoid network back through the planned
/// conv stack: logit per activation, nearest upsampling per pool, and the
/// plan's delta kernels undone per conv. Values reaching the same pixel from
/// several channels are averaged; pixels reached by none get `fill`.
pub fn lenet_reconstruct(z: &Tensor<f32>, spec: &ModelSpec, plan: &ConvPlan, fill: FillMode) -> Result<Estimate> {
    if plan.activation != Activation::Sigmoid {
        return Err(MkorError::UnsupportedModel(
            "sigmoid inversion needs a sigmoid conv stack".into(),
        ));
    }
    if plan.model != spec.name {
        return Err(MkorError::InvalidConfig(format!(
            "plan for {} used on {}",
            plan.model, spec.name
        )));
    }
    let z0 = if z.shape().len() == 1 {
        z.clone().reshape(plan.output_shape.to_vec())?
    } else {
        z.clone()
    };
    check_z0(&z0, plan)?;
    let mut report = EstimateReport::default();
    let [ih, iw, ic] = plan.input_shape;
    let mut sums = vec![0.0f64; ih * iw * ic];
    let mut counts = vec![0u32; ih * iw * ic];
    let end = spec.flatten_index().unwrap_or(spec.layers.len());
    let [oh, ow, _] = plan.output_shape;
    // betas multiplied in up to each planned layer, for the bias written at injection
    let mut prefix = Vec::with_capacity(plan.layers.len());
    let mut acc = 1.0;
    for lp in &plan.layers {
        acc *= lp.beta;
        prefix.push(acc);
    }
    for fc in &plan.channels {
        // (height, width, values) of one channel, walking backwards
        let (mut h, mut w) = (oh, ow);
        let mut map: Vec<Option<f64>> = (0..oh * ow)
            .map(|p| Some(z0.at(p / ow, p % ow, fc.channel) as f64))
            .collect();
        let mut ch = fc.channel;
        for idx in (0..end).rev() {
            match &spec.layers[idx] {
                Layer::Act(Activation::Sigmoid) => {
                    for v in map.iter_mut().flatten() {
                        let (x, c) = inverse_sigmoid(*v, SIGMOID_DELTA);
                        report.clamped += c as usize;
                        *v = x;
                    }
                }
                Layer::Act(Activation::Relu) => {}
                Layer::Pool(_) => {
                    let [ph, pw, _] = <[usize; 3]>::try_from(spec.input_shape_of(idx)).expect("pool input is HWC");
                    let mut up = vec![None; ph * pw];
                    for y in 0..ph {
                        for x in 0..pw {
                            if y / 2 < h && x / 2 < w {
                                up[y * pw + x] = map[(y / 2) * w + x / 2];
                            }
                        }
                    }
                    (h, w, map) = (ph, pw, up);
                }
                Layer::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let pos = plan
                        .layers
                        .iter()
                        .position(|l| l.layer == idx)
                        .ok_or_else(|| MkorError::InvalidConfig(format!("conv layer {} missing from plan", idx)))?;
                    let lp = &plan.layers[pos];
                    let edge = lp.edges.iter().find(|e| e.to == ch).ok_or_else(|| {
                        MkorError::InvalidConfig(format!("channel {} has no edge at layer {}", ch, idx))
                    })?;
                    let bias = prefix[pos] * edge.role.bias();
                    let gain = lp.beta * edge.role.weight();
                    let [ph, pw, _] = <[usize; 3]>::try_from(spec.input_shape_of(idx)).expect("conv input is HWC");
                    let (dy, dx) = edge.role.offset();
                    let c = (kernel / 2) as i64;
                    let mut back = vec![None; ph * pw];
                    for y in 0..h {
                        for x in 0..w {
                            let Some(v) = map[y * w + x] else { continue };
                            let sy = (*stride * y) as i64 + c + dy - *padding as i64;
                            let sx = (*stride * x) as i64 + c + dx - *padding as i64;
                            if sy < 0 || sx < 0 || sy >= ph as i64 || sx >= pw as i64 {
                                continue;
                            }
                            back[sy as usize * pw + sx as usize] = Some((v - bias) / gain);
                        }
                    }
                    (h, w, map) = (ph, pw, back);
                    ch = edge.from;
                }
                _ => {}
            }
        }
        debug_assert_eq!((h, w), (ih, iw));
        for (p, v) in map.iter().enumerate() {
            if let Some(v) = v {
                sums[p * ic + fc.color] += v;
                counts[p * ic + fc.color] += 1;
            }
        }
    }
    let values: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    report.both_bounds = counts.iter().filter(|&&n| n > 0).count();
    Ok(finish(values, [ih, iw, ic], fill, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibration {
    MinMax,
    HistogramMatch,
}

impl Calibration {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "minmax" | "min-max" => Ok(Calibration::MinMax),
            "histogram-match" | "histogram" => Ok(Calibration::HistogramMatch),
            _ => Err(MkorError::InvalidConfig(format!("unknown calibration {:?}", s))),
        }
    }
}

/// Minmax stretches values affinely onto [0, 1] (a constant image is returned
/// as is). Histogram matching remaps values monotonically onto the reference
/// distribution; tied values share the quantile of their group's mean rank.
pub fn calibrate_magnitude(
    image: &Tensor<f32>,
    mode: Calibration,
    reference: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    match mode {
        Calibration::MinMax => {
            let (lo, hi) = image
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if image.is_empty() || hi <= lo {
                return Ok(image.clone());
            }
            let span = (hi - lo) as f64;
            Ok(image.map(|v| ((v - lo) as f64 / span) as f32))
        }
        Calibration::HistogramMatch => {
            let reference = reference
                .ok_or_else(|| MkorError::InvalidConfig("histogram matching needs a reference image".into()))?;
            if reference.is_empty() {
                return Err(MkorError::InvalidConfig("empty reference image".into()));
            }
            let mut sorted_ref: Vec<f32> = reference.data().to_vec();
            sorted_ref.sort_by(f32::total_cmp);
            let n = image.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| image.data()[a].total_cmp(&image.data()[b]));
            let mut out = vec![0.0f32; n];
            let m = sorted_ref.len();
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && image.data()[order[j + 1]] == image.data()[order[i]] {
                    j += 1;
                }
                let rank = (i + j) as f64 / 2.0;
                let q = if n > 1 { rank / (n - 1) as f64 } else { 0.5 };
                let pos = q * (m - 1) as f64;
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                let v = if k + 1 < m {
                    sorted_ref[k] as f64 * (1.0 - frac) + sorted_ref[k + 1] as f64 * frac
                } else {
                    sorted_ref[m - 1] as f64
                };
                for &o in &order[i..=j] {
                    out[o] = v as f32;
                }
                i = j + 1;
            }
            Tensor::new(image.shape().to_vec(), out)
        }
    }
}
