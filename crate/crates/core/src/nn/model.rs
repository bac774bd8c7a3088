//! Layer graph descriptions for the four supported networks.

use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::nn::params::{ParamEntry, ParamLayout, ParamRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// 2x2 pooling with stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Act(Activation),
    Pool(PoolKind),
    Flatten,
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Fc { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lenet5Original,
    Lenet5Modified,
    Vgg16Original,
    Vgg16Modified,
    Custom,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lenet5-original" => Ok(Variant::Lenet5Original),
            "lenet5-modified" => Ok(Variant::Lenet5Modified),
            "vgg16-original" => Ok(Variant::Vgg16Original),
            "vgg16-modified" => Ok(Variant::Vgg16Modified),
            other => Err(MkorError::UnsupportedModel(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Lenet5Original => "lenet5-original",
            Variant::Lenet5Modified => "lenet5-modified",
            Variant::Vgg16Original => "vgg16-original",
            Variant::Vgg16Modified => "vgg16-modified",
            Variant::Custom => "custom",
        }
    }

    pub fn is_lenet(&self) -> bool {
        matches!(self, Variant::Lenet5Original | Variant::Lenet5Modified)
    }

    pub fn is_modified(&self) -> bool {
        matches!(self, Variant::Lenet5Modified | Variant::Vgg16Modified)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in +-1/sqrt(fan_in) for weights and biases.
    FanInUniform,
    /// Conv: normal with std sqrt(2 / fan_out), zero bias. FC: normal(0, 0.01), zero bias.
    VggKaiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// Square input side; 28 for LeNet and 224 for VGG when absent.
    pub input_side: Option<usize>,
    /// Classifier hidden widths; (120, 84) for LeNet and (4096, 4096) for VGG when absent.
    pub fc_hidden: Option<Vec<usize>>,
    pub fc_bias: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            num_classes,
            input_side: None,
            fc_hidden: None,
            fc_bias: true,
        }
    }

    pub fn with_input_side(mut self, side: usize) -> Self {
        self.input_side = Some(side);
        self
    }

    pub fn with_fc_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.fc_hidden = Some(hidden);
        self
    }

    pub fn without_fc_bias(mut self) -> Self {
        self.fc_bias = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub variant: Variant,
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Output shape of every layer.
    pub shapes: Vec<Vec<usize>>,
    pub fc_bias: bool,
    pub init: InitScheme,
    pub layout: ParamLayout,
}

const VGG16_CFG: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
];

/// Build one of the four supported networks.
pub fn build_model(config: &ModelConfig) -> Result<ModelSpec> {
    if config.num_classes < 2 {
        return Err(MkorError::InvalidConfig("num_classes must be at least 2".into()));
    }
    match config.variant {
        Variant::Lenet5Original | Variant::Lenet5Modified => build_lenet(config),
        Variant::Vgg16Original | Variant::Vgg16Modified => build_vgg(config),
        Variant::Custom => Err(MkorError::UnsupportedModel(
            "custom models are built with ModelSpec::new".into(),
        )),
    }
}

fn classifier(layers: &mut Vec<Layer>, mut width: usize, hidden: &[usize], classes: usize, act: Activation) {
    layers.push(Layer::Flatten);
    for &h in hidden {
        layers.push(Layer::Fc {
            in_features: width,
            out_features: h,
        });
        layers.push(Layer::Act(act));
        width = h;
    }
    layers.push(Layer::Fc {
        in_features: width,
        out_features: classes,
    });
}

fn build_lenet(config: &ModelConfig) -> Result<ModelSpec> {
    let side = config.input_side.unwrap_or(28);
    let modified = config.variant.is_modified();
    let stride = if modified { 2 } else { 1 };
    let mut layers = vec![Layer::Conv {
        in_ch: 1,
        out_ch: 6,
        kernel: 5,
        stride,
        padding: 2,
    }];
    layers.push(Layer::Act(Activation::Sigmoid));
    if !modified {
        layers.push(Layer::Pool(PoolKind::Avg));
    }
    layers.push(Layer::Conv {
        in_ch: 6,
        out_ch: 16,
        kernel: 5,
        stride,
        padding: 0,
    });
    layers.push(Layer::Act(Activation::Sigmoid));
    if !modified {
        layers.push(Layer::Pool(PoolKind::Avg));
    }
    let flat = conv_output_side(side, &layers)?;
    let hidden = config.fc_hidden.clone().unwrap_or_else(|| vec![120, 84]);
    classifier(
        &mut layers,
        flat * flat * 16,
        &hidden,
        config.num_classes,
        Activation::Sigmoid,
    );
    ModelSpec::new(
        config.variant.name(),
        config.variant,
        [side, side, 1],
        layers,
        config.fc_bias,
        InitScheme::FanInUniform,
    )
}

fn build_vgg(config: &ModelConfig) -> Result<ModelSpec> {
    let side = config.input_side.unwrap_or(224);
    let modified = config.variant.is_modified();
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for (i, entry) in VGG16_CFG.iter().enumerate() {
        match entry {
            Some(out_ch) => {
                let before_pool = VGG16_CFG.get(i + 1).is_some_and(|n| n.is_none());
                layers.push(Layer::Conv {
                    in_ch,
                    out_ch: *out_ch,
                    kernel: 3,
                    stride: if modified && before_pool { 2 } else { 1 },
                    padding: 1,
                });
                layers.push(Layer::Act(Activation::Relu));
                in_ch = *out_ch;
            }
            None if !modified => layers.push(Layer::Pool(PoolKind::Max)),
            None => {}
        }
    }
    let flat = conv_output_side(side, &layers)?;
    let hidden = config.fc_hidden.clone().unwrap_or_else(|| vec![4096, 4096]);
    classifier(
        &mut layers,
        flat * flat * 512,
        &hidden,
        config.num_classes,
        Activation::Relu,
    );
    ModelSpec::new(
        config.variant.name(),
        config.variant,
        [side, side, 3],
        layers,
        config.fc_bias,
        InitScheme::VggKaiming,
    )
}

fn conv_output_side(side: usize, layers: &[Layer]) -> Result<usize> {
    let mut s = side;
    for layer in layers {
        s = match *layer {
            Layer::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                if s + 2 * padding < kernel {
                    return Err(MkorError::InvalidConfig(format!("input side {} too small", side)));
                }
                (s + 2 * padding - kernel) / stride + 1
            }
            Layer::Pool(_) => s / 2,
            _ => s,
        };
        if s == 0 {
            return Err(MkorError::InvalidConfig(format!("input side {} too small", side)));
        }
    }
    Ok(s)
}

impl ModelSpec {
    /// Validate a layer graph and derive shapes and the parameter layout.
    pub fn new(
        name: &str,
        variant: Variant,
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        fc_bias: bool,
        init: InitScheme,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |layer: usize, role: ParamRole, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry {
                layer,
                role,
                shape,
                offset,
            });
            offset += len;
        };
        for (i, layer) in layers.iter().enumerate() {
            let bad = |msg: String| MkorError::ShapeMismatch(format!("layer {}: {}", i, msg));
            shape = match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[2] != in_ch {
                        return Err(bad(format!("conv expects {} channels, input {:?}", in_ch, shape)));
                    }
                    if stride == 0 || kernel == 0 || shape[0] + 2 * padding < kernel || shape[1] + 2 * padding < kernel
                    {
                        return Err(bad(format!("conv kernel {} does not fit {:?}", kernel, shape)));
                    }
                    push(i, ParamRole::Weight, vec![out_ch, kernel, kernel, in_ch]);
                    push(i, ParamRole::Bias, vec![out_ch]);
                    vec![
                        (shape[0] + 2 * padding - kernel) / stride + 1,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        out_ch,
                    ]
                }
                Layer::Act(_) => shape,
                Layer::Pool(_) => {
                    if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
                        return Err(bad(format!("pool input {:?}", shape)));
                    }
                    vec![shape[0] / 2, shape[1] / 2, shape[2]]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Fc {
                    in_features,
                    out_features,
                } => {
                    if shape.len() != 1 || shape[0] != in_features {
                        return Err(bad(format!("fc expects {} features, input {:?}", in_features, shape)));
                    }
                    push(i, ParamRole::Weight, vec![out_features, in_features]);
                    if fc_bias {
                        push(i, ParamRole::Bias, vec![out_features]);
                    }
                    vec![out_features]
                }
            };
            shapes.push(shape.clone());
        }
        match shapes.last() {
            Some(s) if s.len() == 1 => {}
            _ => return Err(MkorError::ShapeMismatch("model must end in a vector of logits".into())),
        }
        Ok(ModelSpec {
            name: name.to_string(),
            variant,
            input_shape,
            layers,
            shapes,
            fc_bias,
            init,
            layout: ParamLayout::new(entries),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.indices(|l| matches!(l, Layer::Conv { .. }))
    }

    pub fn fc_layers(&self) -> Vec<usize> {
        self.indices(|l| matches!(l, Layer::Fc { .. }))
    }

    fn indices(&self, f: impl Fn(&Layer) -> bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| f(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the flatten layer, if any.
    pub fn flatten_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Flatten))
    }

    /// Shape of the conv feature map that feeds the classifier.
    pub fn feature_shape(&self) -> Vec<usize> {
        match self.flatten_index() {
            Some(0) | None => self.input_shape.to_vec(),
            Some(i) => self.shapes[i - 1].clone(),
        }
    }

    /// Activation applied directly after layer `i`, if any.
    pub fn activation_after(&self, i: usize) -> Option<Activation> {
        match self.layers.get(i + 1) {
            Some(Layer::Act(a)) => Some(*a),
            _ => None,
        }
    }

    /// Shape of the input of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            self.input_shape.to_vec()
        } else {
            self.shapes[i - 1].clone()
        }
    }

    /// The activation used by the conv stack (the first one after a conv).
    pub fn conv_activation(&self) -> Option<Activation> {
        self.conv_layers().first().and_then(|&i| self.activation_after(i))
    }

    /// Downsampling stages in order: pools, or stride-2 convs in modified networks.
    pub fn downsampling_stages(&self) -> Vec<usize> {
        self.indices(|l| match l {
            Layer::Pool(_) => true,
            Layer::Conv { stride, .. } => *stride > 1,
            _ => false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }
}
