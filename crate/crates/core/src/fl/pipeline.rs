//! Malicious server round trip: inject, let the client compute, reconstruct, score.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::conv::{
    build_conv_plan, calibrate_magnitude, estimate_input, inject_conv_inconspicuous, inject_conv_naive,
    lenet_reconstruct, Calibration, ConvInjectConfig, ConvPlan, EstimateReport, FillMode,
};
use crate::attack::fc::{
    inject_fc_inconspicuous, inject_fc_naive, reconstruct_fc_inputs, DecouplingMap, FcInjectConfig, InjectionMode,
};
use crate::datasets::{upscale_bilinear, LabeledImage, UpscaleInverse};
use crate::error::{MkorError, Result};
use crate::fl::{client_update_with_stats, ClientStats, DefenseConfig};
use crate::metrics::{score_batch, BatchScore};
use crate::nn::model::{build_model, Activation, ModelConfig, ModelSpec, Variant};
use crate::nn::params::{init_params, GradientUpdate, ParamSet};
use crate::tensor::Tensor;

/// Weight given to filled pixels when undoing an upscale.
const FILLED_WEIGHT: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub model: ModelConfig,
    pub param_seed: u64,
    pub fc_mode: InjectionMode,
    pub fc: FcInjectConfig,
    pub conv_mode: InjectionMode,
    pub conv: ConvInjectConfig,
    /// Four-direction layer count; the rest of the downsampling stages are copy-only.
    pub conv_i: Option<usize>,
    pub conv_seed: u64,
    pub defense: DefenseConfig,
    pub reconstruct: ReconstructConfig,
    pub threads: usize,
}

impl AttackConfig {
    pub fn new(model: ModelConfig) -> Self {
        AttackConfig {
            model,
            param_seed: 0,
            fc_mode: InjectionMode::Inconspicuous,
            fc: FcInjectConfig::default(),
            conv_mode: InjectionMode::Inconspicuous,
            conv: ConvInjectConfig::default(),
            conv_i: None,
            conv_seed: 0,
            defense: DefenseConfig::default(),
            reconstruct: ReconstructConfig::default(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    /// Per-model default when absent: zero for LeNet, nearest for VGG.
    pub fill: Option<FillMode>,
    pub calibration: Option<Calibration>,
    /// Positive scale applied to the recovered features before estimation.
    pub gamma: Option<f64>,
    /// Class-presence threshold on the bias gradient; relative default when absent.
    pub threshold: Option<f64>,
}

/// Parameters as sent by the server plus what the attacker keeps to decode.
#[derive(Clone, Debug)]
pub struct Injected {
    pub params: ParamSet<f32>,
    pub fc_map: DecouplingMap,
    pub conv_plan: Option<ConvPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub denominator: f64,
    pub used_twin: bool,
    pub twin_share: f64,
    pub unnormalized: bool,
    pub estimate: EstimateReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub model: String,
    pub batch_size: usize,
    pub present: Vec<usize>,
    pub absent: Vec<usize>,
    pub sink_class: Option<usize>,
    pub classes: Vec<ClassReport>,
    #[serde(default)]
    pub score: Option<BatchScore>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub inject_secs: f64,
    pub gradient_secs: f64,
    pub reconstruct_secs: f64,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub report: ReconstructionReport,
    /// Per recovered class, at the ground-truth resolution when it was known.
    pub images: Vec<(usize, Tensor<f32>)>,
    pub client: ClientStats,
    pub injected: Injected,
    pub timings: Timings,
}

/// Four-direction stages used when the config does not say.
pub fn default_conv_i(spec: &ModelSpec) -> usize {
    spec.downsampling_stages().len().min(3)
}

pub fn default_fill(spec: &ModelSpec) -> FillMode {
    match spec.variant {
        Variant::Lenet5Original | Variant::Lenet5Modified => FillMode::Zero,
        Variant::Vgg16Original | Variant::Vgg16Modified => FillMode::Nearest,
        Variant::Custom => FillMode::MidGray,
    }
}

pub fn build(cfg: &AttackConfig) -> Result<(ModelSpec, ParamSet<f32>)> {
    let spec = build_model(&cfg.model)?;
    let params = init_params(&spec, cfg.param_seed);
    Ok((spec, params))
}

/// Classifier injection followed by conv injection.
pub fn inject(spec: &ModelSpec, params: &ParamSet<f32>, cfg: &AttackConfig) -> Result<Injected> {
    let (params, fc_map) = match cfg.fc_mode {
        InjectionMode::Naive => inject_fc_naive(spec, params, &cfg.fc)?,
        InjectionMode::Inconspicuous => inject_fc_inconspicuous(spec, params, &cfg.fc)?,
    };
    if spec.conv_layers().is_empty() {
        return Ok(Injected {
            params,
            fc_map,
            conv_plan: None,
        });
    }
    let stages = spec.downsampling_stages().len();
    let i = cfg.conv_i.unwrap_or_else(|| default_conv_i(spec));
    if i > stages {
        return Err(MkorError::PoolingCount {
            requested: i,
            available: stages,
        });
    }
    let plan = build_conv_plan(spec, i, stages - i, cfg.conv_seed)?;
    let (params, plan) = match cfg.conv_mode {
        InjectionMode::Naive => {
            let plan = match cfg.conv.beta {
                Some(b) => plan.with_beta(b),
                None => plan,
            };
            (inject_conv_naive(spec, &params, &plan)?, plan)
        }
        InjectionMode::Inconspicuous => inject_conv_inconspicuous(spec, &params, &plan, &cfg.conv)?,
    };
    Ok(Injected {
        params,
        fc_map,
        conv_plan: Some(plan),
    })
}

/// Bring an image to the model's input size (bilinear upscaling when smaller).
pub fn prepare_input(image: &Tensor<f32>, spec: &ModelSpec) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    let [ih, iw, ic] = spec.input_shape;
    if c != ic {
        return Err(MkorError::ShapeMismatch(format!(
            "{} image channels, model takes {}",
            c, ic
        )));
    }
    if (h, w) == (ih, iw) {
        return Ok(image.clone());
    }
    if h > ih || w > iw {
        return Err(MkorError::ShapeMismatch(format!(
            "{}x{} image is larger than the {}x{} input",
            h, w, ih, iw
        )));
    }
    upscale_bilinear(image, ih, iw)
}

pub fn prepare_batch(batch: &[LabeledImage], spec: &ModelSpec) -> Result<Vec<LabeledImage>> {
    batch
        .iter()
        .map(|item| {
            Ok(LabeledImage {
                image: prepare_input(&item.image, spec)?,
                label: item.label,
            })
        })
        .collect()
}

/// Decode every present class from one gradient. `native` is the ground-truth
/// image size when the client upscaled its inputs.
pub fn reconstruct(
    spec: &ModelSpec,
    fc_map: &DecouplingMap,
    conv_plan: Option<&ConvPlan>,
    grad: &GradientUpdate<f32>,
    cfg: &ReconstructConfig,
    native: Option<(usize, usize)>,
    calibration_reference: Option<&Tensor<f32>>,
) -> Result<(Vec<(usize, Tensor<f32>)>, ReconstructionReport)> {
    if let Some(g) = cfg.gamma {
        if !(g > 0.0) {
            return Err(MkorError::InvalidConfig("gamma must be positive".into()));
        }
    }
    let recoveries = reconstruct_fc_inputs(grad, fc_map, cfg.threshold)?;
    let fill = cfg.fill.unwrap_or_else(|| default_fill(spec));
    let [ih, iw, _] = spec.input_shape;
    let mut report = ReconstructionReport {
        model: spec.name.clone(),
        batch_size: grad.batch_size,
        sink_class: fc_map.sink_class,
        ..Default::default()
    };
    let mut images = Vec::new();
    let mut inverse: Option<UpscaleInverse> = None;
    for rec in recoveries {
        if !rec.present {
            report.absent.push(rec.class);
            continue;
        }
        report.present.push(rec.class);
        let gamma = cfg.gamma.unwrap_or(1.0) as f32;
        let z: Vec<f32> = rec.z.iter().map(|&v| v * gamma).collect();
        let (image, est_report, described) = match conv_plan {
            Some(plan) => {
                let z0 = Tensor::new(plan.output_shape.to_vec(), z)?;
                let est = match plan.activation {
                    Activation::Sigmoid => lenet_reconstruct(&z0, spec, plan, fill)?,
                    Activation::Relu => estimate_input(&z0, plan, fill)?,
                };
                (est.image, est.report, Some(est.described))
            }
            None => {
                if z.len() != spec.input_len() {
                    return Err(MkorError::UnsupportedModel(
                        "without a conv stack the classifier must read the image directly".into(),
                    ));
                }
                (
                    Tensor::new(spec.input_shape.to_vec(), z)?,
                    EstimateReport::default(),
                    None,
                )
            }
        };
        let image = match native {
            Some((nh, nw)) if (nh, nw) != (ih, iw) => {
                if inverse.is_none() {
                    let weights: Vec<f64> = match &described {
                        Some(d) => d.iter().map(|&b| if b { 1.0 } else { FILLED_WEIGHT }).collect(),
                        None => vec![1.0; ih * iw],
                    };
                    inverse = Some(UpscaleInverse::new(nh, nw, ih, iw, &weights)?);
                }
                inverse.as_ref().unwrap().solve(&image)?
            }
            _ => image,
        };
        let image = match cfg.calibration {
            Some(mode) => calibrate_magnitude(&image, mode, calibration_reference)?,
            None => image,
        };
        if est_report.clamped > 0 {
            report.warnings.push(format!(
                "class {}: {} sigmoid inputs clamped",
                rec.class, est_report.clamped
            ));
        }
        if est_report.inverted > 0 {
            report.warnings.push(format!(
                "class {}: {} pixels with inverted bounds",
                rec.class, est_report.inverted
            ));
        }
        report.classes.push(ClassReport {
            class: rec.class,
            denominator: rec.denominator,
            used_twin: rec.used_twin,
            twin_share: rec.twin_share,
            unnormalized: rec.unnormalized,
            estimate: est_report,
        });
        images.push((rec.class, image));
    }
    if let Some(c) = report.classes.first() {
        if c.estimate.filled > 0 {
            report.warnings.push(format!(
                "{} pixel values per image had no describer and were filled ({:?})",
                c.estimate.filled, fill
            ));
        }
    }
    if report.sink_class.is_some() {
        report.warnings.push(format!(
            "class {} is the sink and is not recovered",
            report.sink_class.unwrap()
        ));
    }
    Ok((images, report))
}

/// Build, inject, simulate one client on `batch`, reconstruct and score.
pub fn run_attack(cfg: &AttackConfig, batch: &[LabeledImage]) -> Result<AttackOutcome> {
    let t0 = Instant::now();
    let (spec, params) = build(cfg)?;
    let injected = inject(&spec, &params, cfg)?;
    let t1 = Instant::now();
    let inputs = prepare_batch(batch, &spec)?;
    let (grad, client) = client_update_with_stats(&spec, &injected.params, &inputs, &cfg.defense, cfg.threads)?;
    let t2 = Instant::now();
    let native = batch.first().map(|b| (b.image.shape()[0], b.image.shape()[1]));
    let (images, mut report) = reconstruct(
        &spec,
        &injected.fc_map,
        injected.conv_plan.as_ref(),
        &grad,
        &cfg.reconstruct,
        native,
        None,
    )?;
    let t3 = Instant::now();
    report.score = Some(score_batch(&images, batch)?);
    Ok(AttackOutcome {
        report,
        images,
        client,
        injected,
        timings: Timings {
            inject_secs: (t1 - t0).as_secs_f64(),
            gradient_secs: (t2 - t1).as_secs_f64(),
            reconstruct_secs: (t3 - t2).as_secs_f64(),
        },
    })
}
