//! Flat parameter storage addressed through a manifest of named blocks.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{MkorError, Result};
use crate::nn::model::{InitScheme, Layer, ModelSpec};
use crate::real::Real;
use crate::rng::{seeded, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }
}

/// One parameter block. Conv weights are (out, kh, kw, in); FC weights are (out, in).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        ParamLayout { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.last().map(|e| e.offset + e.len()).unwrap_or(0)
    }

    pub fn find(&self, layer: usize, role: ParamRole) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.role == role)
    }

    pub fn same_shape(&self, other: &ParamLayout) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.role == b.role && a.shape == b.shape)
    }
}

/// All learnable values of a model in manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T = f32> {
    pub layout: ParamLayout,
    pub values: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(layout: &ParamLayout) -> Self {
        ParamSet {
            layout: layout.clone(),
            values: vec![T::zero(); layout.total()],
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(MkorError::LayoutMismatch(format!(
                "layout holds {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(ParamSet {
            layout: layout.clone(),
            values,
        })
    }

    fn entry(&self, layer: usize, role: ParamRole) -> Result<&ParamEntry> {
        self.layout
            .find(layer, role)
            .ok_or_else(|| MkorError::LayoutMismatch(format!("no {} for layer {}", role.as_str(), layer)))
    }

    pub fn get(&self, layer: usize, role: ParamRole) -> Result<&[T]> {
        let r = self.entry(layer, role)?.range();
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, layer: usize, role: ParamRole) -> Result<&mut [T]> {
        let r = self.entry(layer, role)?.range();
        Ok(&mut self.values[r])
    }

    pub fn weight(&self, layer: usize) -> Result<&[T]> {
        self.get(layer, ParamRole::Weight)
    }

    pub fn weight_mut(&mut self, layer: usize) -> Result<&mut [T]> {
        self.get_mut(layer, ParamRole::Weight)
    }

    /// Bias block of a layer; `None` when the layer has no bias.
    pub fn bias(&self, layer: usize) -> Option<&[T]> {
        self.layout
            .find(layer, ParamRole::Bias)
            .map(|e| &self.values[e.range()])
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut [T]> {
        let r = self.layout.find(layer, ParamRole::Bias)?.range();
        Some(&mut self.values[r])
    }

    /// Weight and bias blocks borrowed mutably at once.
    pub fn weight_bias_mut(&mut self, layer: usize) -> Result<(&mut [T], Option<&mut [T]>)> {
        let w = self.entry(layer, ParamRole::Weight)?.range();
        let b = self.layout.find(layer, ParamRole::Bias).map(|e| e.range());
        match b {
            None => Ok((&mut self.values[w], None)),
            Some(b) => {
                if b.start >= w.end {
                    let (lo, hi) = self.values.split_at_mut(b.start);
                    Ok((&mut lo[w], Some(&mut hi[..b.end - b.start])))
                } else {
                    let (lo, hi) = self.values.split_at_mut(w.start);
                    Ok((&mut hi[..w.end - w.start], Some(&mut lo[b])))
                }
            }
        }
    }

    pub fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        if !self.layout.same_shape(&spec.layout) || self.values.len() != spec.layout.total() {
            return Err(MkorError::LayoutMismatch(format!(
                "parameters do not match model {}",
                spec.name
            )));
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(MkorError::LayoutMismatch(
                "cannot add parameter sets of different size".into(),
            ));
        }
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            *v = *v * s;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }
}

/// Summed gradient a client uploads, with the batch size it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate<T = f32> {
    pub grads: ParamSet<T>,
    pub batch_size: usize,
}

/// Seeded initialization following the model's init scheme.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet<f32> {
    let mut rng = seeded(seed, Stream::Params);
    let mut params = ParamSet::zeros(&spec.layout);
    for entry in &spec.layout.entries {
        let layer = spec.layers[entry.layer];
        let (fan_in, fan_out, is_conv) = match layer {
            Layer::Conv {
                in_ch, out_ch, kernel, ..
            } => (in_ch * kernel * kernel, out_ch * kernel * kernel, true),
            Layer::Fc {
                in_features,
                out_features,
            } => (in_features, out_features, false),
            _ => unreachable!("parameter entry on a parameter-free layer"),
        };
        let block = &mut params.values[entry.range()];
        match (spec.init, entry.role) {
            (InitScheme::FanInUniform, _) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                block.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            (InitScheme::VggKaiming, ParamRole::Weight) => {
                let std = if is_conv { (2.0 / fan_out as f32).sqrt() } else { 0.01 };
                let dist = Normal::new(0.0f32, std).expect("positive std");
                block.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            (InitScheme::VggKaiming, ParamRole::Bias) => {}
        }
    }
    params
}
