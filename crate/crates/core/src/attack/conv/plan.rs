//! Layout of the malicious filter chain over a model's conv stack.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::nn::model::{Activation, Layer, ModelSpec};
use crate::rng::{seeded, Stream};

/// Delta kernels. Shift taps sit below/right of the center, so a shifted
/// channel at (h, w) reads its input at (h, w + 1), (h + 1, w) or (h + 1, w + 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterRole {
    Copy,
    Min,
    Right,
    Lower,
    LowerRight,
}

impl FilterRole {
    /// (row, col) tap offset from the kernel center.
    pub fn offset(&self) -> (i64, i64) {
        match self {
            FilterRole::Copy | FilterRole::Min => (0, 0),
            FilterRole::Right => (0, 1),
            FilterRole::Lower => (1, 0),
            FilterRole::LowerRight => (1, 1),
        }
    }

    pub fn weight(&self) -> f64 {
        if *self == FilterRole::Min {
            -1.0
        } else {
            1.0
        }
    }

    /// Bias in units of the layer's beta.
    pub fn bias(&self) -> f64 {
        if *self == FilterRole::Min {
            1.0
        } else {
            0.0
        }
    }
}

const FOUR_DIRECTIONS: [FilterRole; 4] = [
    FilterRole::Copy,
    FilterRole::Right,
    FilterRole::Lower,
    FilterRole::LowerRight,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerType {
    /// Copy and min filter per input color.
    Split,
    Copy,
    /// Copy filters feeding a downsampling stage outside the four-direction range.
    CopyPool,
    /// Copy plus three shifts, feeding a downsampling stage.
    FourDirection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub role: FilterRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerPlan {
    pub layer: usize,
    pub kind: LayerType,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub edges: Vec<Edge>,
    pub beta: f64,
}

/// Affine map from a z0 coordinate to an input interval:
/// `[scale * h + offset, scale * h + offset + extent - 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMap {
    pub scale: i64,
    pub offset: i64,
    pub extent: i64,
}

impl AxisMap {
    const IDENTITY: AxisMap = AxisMap {
        scale: 1,
        offset: 0,
        extent: 1,
    };

    /// Interval for coordinate `h`, clipped to `[0, size)`; `None` if fully outside.
    pub fn interval(&self, h: usize, size: usize) -> Option<(usize, usize)> {
        let lo = self.scale * h as i64 + self.offset;
        let hi = lo + self.extent - 1;
        let (lo, hi) = (lo.max(0), hi.min(size as i64 - 1));
        (lo <= hi).then_some((lo as usize, hi as usize))
    }
}

/// A considered channel of the conv output z0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalChannel {
    pub channel: usize,
    pub color: usize,
    pub polarity: Polarity,
    /// Role taken at each four-direction layer, in forward order.
    pub shifts: Vec<FilterRole>,
    pub rows: AxisMap,
    pub cols: AxisMap,
}

impl FinalChannel {
    /// Shift indicators 1_r(c, i) and 1_l(c, i) per four-direction layer.
    pub fn shift_indicators(&self) -> Vec<(bool, bool)> {
        self.shifts
            .iter()
            .map(|r| (r.offset().1 == 1, r.offset().0 == 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvPlan {
    pub model: String,
    pub i_count: usize,
    pub j_count: usize,
    pub seed: u64,
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    pub activation: Activation,
    pub layers: Vec<ConvLayerPlan>,
    pub channels: Vec<FinalChannel>,
}

impl ConvPlan {
    pub fn beta_product(&self) -> f64 {
        self.layers.iter().map(|l| l.beta).product()
    }

    pub fn channel(&self, c: usize) -> Option<&FinalChannel> {
        self.channels.iter().find(|f| f.channel == c)
    }

    pub fn layer(&self, model_layer: usize) -> Option<&ConvLayerPlan> {
        self.layers.iter().find(|l| l.layer == model_layer)
    }

    /// Set the same beta on every planned layer.
    pub fn with_beta(mut self, beta: f64) -> Self {
        for l in &mut self.layers {
            l.beta = beta;
        }
        self
    }
}

/// Assign layer types along the conv stack and draw channel maps from `seed`.
/// The last `i` downsampling stages get a four-direction conv in front of them.
pub fn build_conv_plan(spec: &ModelSpec, i: usize, j: usize, seed: u64) -> Result<ConvPlan> {
    let convs = spec.conv_layers();
    let stages = spec.downsampling_stages();
    if convs.is_empty() {
        return Err(MkorError::UnsupportedModel(format!("{} has no conv layers", spec.name)));
    }
    if i + j != stages.len() {
        return Err(MkorError::PoolingCount {
            requested: i + j,
            available: stages.len(),
        });
    }
    let activation = spec
        .conv_activation()
        .ok_or_else(|| MkorError::UnsupportedModel("conv layers need an activation".into()))?;
    let split = activation == Activation::Relu;
    // the conv that feeds (or is) each stage
    let stage_conv: Vec<usize> = stages
        .iter()
        .map(|&s| convs.iter().copied().filter(|&c| c <= s).max())
        .collect::<Option<_>>()
        .ok_or_else(|| MkorError::UnsupportedModel("downsampling before the first conv".into()))?;
    let mut rng = seeded(seed, Stream::ConvPlan);
    let colors = spec.input_shape[2];
    // (channel, color, polarity, shifts)
    let mut live: Vec<(usize, usize, Polarity, Vec<FilterRole>)> =
        (0..colors).map(|c| (c, c, Polarity::Max, Vec::new())).collect();
    let mut layers = Vec::new();
    for (ci, &layer) in convs.iter().enumerate() {
        let Layer::Conv { out_ch, .. } = spec.layers[layer] else {
            unreachable!()
        };
        let stage = stage_conv.iter().position(|&s| s == layer);
        let kind = if ci == 0 && split {
            LayerType::Split
        } else {
            match stage {
                Some(s) if s >= stages.len() - i => LayerType::FourDirection,
                Some(_) => LayerType::CopyPool,
                None => LayerType::Copy,
            }
        };
        let roles: &[FilterRole] = match kind {
            LayerType::Split => &[FilterRole::Copy, FilterRole::Min],
            LayerType::FourDirection => &FOUR_DIRECTIONS,
            _ => &[FilterRole::Copy],
        };
        let needed = live.len() * roles.len();
        if needed > out_ch {
            return Err(MkorError::ChannelBudget {
                layer,
                needed,
                available: out_ch,
            });
        }
        let outputs = sample(&mut rng, out_ch, needed).into_vec();
        let mut edges = Vec::with_capacity(needed);
        let mut next = Vec::with_capacity(needed);
        for (k, (from, color, polarity, shifts)) in live.iter().enumerate() {
            for (r, &role) in roles.iter().enumerate() {
                let to = outputs[k * roles.len() + r];
                edges.push(Edge { from: *from, to, role });
                let polarity = if role == FilterRole::Min {
                    Polarity::Min
                } else {
                    *polarity
                };
                let mut shifts = shifts.clone();
                if kind == LayerType::FourDirection {
                    shifts.push(role);
                }
                next.push((to, *color, polarity, shifts));
            }
        }
        layers.push(ConvLayerPlan {
            layer,
            kind,
            inputs: live.iter().map(|l| l.0).collect(),
            outputs,
            edges,
            beta: 1.0,
        });
        live = next;
    }
    let z0 = spec.feature_shape();
    if z0.len() != 3 {
        return Err(MkorError::UnsupportedModel(
            "conv stack must end in an (H, W, C) map".into(),
        ));
    }
    let mut plan = ConvPlan {
        model: spec.name.clone(),
        i_count: i,
        j_count: j,
        seed,
        input_shape: spec.input_shape,
        output_shape: [z0[0], z0[1], z0[2]],
        activation,
        layers,
        channels: Vec::new(),
    };
    let last_conv = *convs.last().unwrap();
    let mut channels = Vec::with_capacity(live.len());
    for (channel, color, polarity, shifts) in live {
        let (rows, cols) = trace_maps(spec, &plan, last_conv, channel)?;
        channels.push(FinalChannel {
            channel,
            color,
            polarity,
            shifts,
            rows,
            cols,
        });
    }
    plan.channels = channels;
    Ok(plan)
}

/// Compose per-layer interval maps from z0 back to the input for one channel.
fn trace_maps(spec: &ModelSpec, plan: &ConvPlan, last_conv: usize, channel: usize) -> Result<(AxisMap, AxisMap)> {
    let mut rows = AxisMap::IDENTITY;
    let mut cols = AxisMap::IDENTITY;
    let mut ch = channel;
    let end = spec.flatten_index().unwrap_or(spec.layers.len());
    debug_assert!(last_conv < end);
    for idx in (0..end).rev() {
        match spec.layers[idx] {
            Layer::Pool(_) => {
                for m in [&mut rows, &mut cols] {
                    *m = AxisMap {
                        scale: 2 * m.scale,
                        offset: 2 * m.offset,
                        extent: 2 * m.extent,
                    };
                }
            }
            Layer::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let lp = plan
                    .layer(idx)
                    .ok_or_else(|| MkorError::InvalidConfig(format!("conv layer {} missing from plan", idx)))?;
                let edge =
                    lp.edges.iter().find(|e| e.to == ch).ok_or_else(|| {
                        MkorError::InvalidConfig(format!("channel {} has no edge at layer {}", ch, idx))
                    })?;
                let (dy, dx) = edge.role.offset();
                let center = (kernel / 2) as i64;
                let s = stride as i64;
                for (m, d) in [(&mut rows, dy), (&mut cols, dx)] {
                    if s > 1 && m.extent > 1 {
                        return Err(MkorError::UnsupportedModel(
                            "strided conv below a pooled region is not rectangular".into(),
                        ));
                    }
                    *m = AxisMap {
                        scale: s * m.scale,
                        offset: s * m.offset + center + d - padding as i64,
                        extent: s * (m.extent - 1) + 1,
                    };
                }
                ch = edge.from;
            }
            _ => {}
        }
    }
    Ok((rows, cols))
}

/// Input rectangle described by z0[h, w, c].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRef {
    /// Inclusive row range.
    pub rows: (usize, usize),
    /// Inclusive column range.
    pub cols: (usize, usize),
    pub color: usize,
    pub polarity: Polarity,
}

/// Region of the input image summarized by z0[h, w, c] (0-based, inclusive
/// ranges, clipped to the image). `Ok(None)` when the region lies outside.
pub fn region_of(h: usize, w: usize, c: usize, plan: &ConvPlan) -> Result<Option<RegionRef>> {
    let [oh, ow, _] = plan.output_shape;
    if h >= oh || w >= ow {
        return Err(MkorError::ShapeMismatch(format!(
            "({}, {}) outside z0 {}x{}",
            h, w, oh, ow
        )));
    }
    let fc = plan
        .channel(c)
        .ok_or_else(|| MkorError::InvalidConfig(format!("channel {} is not considered", c)))?;
    let [ih, iw, _] = plan.input_shape;
    Ok(match (fc.rows.interval(h, ih), fc.cols.interval(w, iw)) {
        (Some(rows), Some(cols)) => Some(RegionRef {
            rows,
            cols,
            color: fc.color,
            polarity: fc.polarity,
        }),
        _ => None,
    })
}
