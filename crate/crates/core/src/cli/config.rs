//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::conv::{Calibration, FillMode};
use crate::attack::fc::{FcInjectConfig, InjectionMode, SinkConfig};
use crate::datasets::{
    cifar100_dir, load_cifar100, load_image_folder, load_mnist_dir, mnist_dir, synth_dataset, zero_border, BatchSpec,
    LabeledImage, Regime,
};
use crate::error::{MkorError, Result};
use crate::fl::pipeline::{AttackConfig, ReconstructConfig};
use crate::fl::{DefenseConfig, NoiseScale};
use crate::nn::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Mnist,
    Cifar100,
    Synth,
    PpmFolder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub classes: usize,
    pub input_side: Option<usize>,
    pub fc_hidden: Option<Vec<usize>>,
    pub fc_bias: bool,

    pub dataset: DatasetSource,
    /// Directory (mnist, ppm-folder) or file (cifar100); built-in default when absent.
    pub data_path: Option<PathBuf>,
    /// MNIST split: "train" or "test".
    pub split: String,
    pub synth_per_class: usize,
    pub synth_side: usize,
    pub synth_channels: usize,
    /// Zero this many pixels along the synthetic image border.
    pub synth_border: usize,

    pub regime: Regime,
    pub batch_size: usize,
    pub n_max: Option<usize>,

    pub fc_mode: InjectionMode,
    pub conv_mode: InjectionMode,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub fc_sigma: f64,
    pub fc_jitter: Option<f64>,
    pub sink: bool,
    pub sink_class: Option<usize>,
    pub sink_bias: f64,
    pub conv_sigma: f64,
    pub conv_keep_band: f64,
    pub beta: Option<f64>,
    pub conv_i: Option<usize>,

    pub clip: Option<f64>,
    pub sigma_dp: Option<f64>,
    pub noise_scale: NoiseScale,

    pub fill: Option<FillMode>,
    pub calibration: Option<Calibration>,
    pub calibration_reference: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub threshold: Option<f64>,

    pub seed_batch: u64,
    pub seed_params: u64,
    pub seed_fc: u64,
    pub seed_conv: u64,
    pub seed_defense: u64,

    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fc = FcInjectConfig::default();
        RunConfig {
            model: "lenet5-original".into(),
            classes: 10,
            input_side: None,
            fc_hidden: None,
            fc_bias: true,
            dataset: DatasetSource::Synth,
            data_path: None,
            split: "test".into(),
            synth_per_class: 1,
            synth_side: 28,
            synth_channels: 1,
            synth_border: 0,
            regime: Regime::Unique,
            batch_size: 10,
            n_max: None,
            fc_mode: InjectionMode::Inconspicuous,
            conv_mode: InjectionMode::Inconspicuous,
            alpha_min: fc.alpha_range.0,
            alpha_max: fc.alpha_range.1,
            fc_sigma: fc.sigma,
            fc_jitter: None,
            sink: true,
            sink_class: None,
            sink_bias: SinkConfig::default().bias,
            conv_sigma: 1e-3,
            conv_keep_band: 3.0,
            beta: None,
            conv_i: None,
            clip: None,
            sigma_dp: None,
            noise_scale: NoiseScale::GlobalRms,
            fill: None,
            calibration: None,
            calibration_reference: None,
            gamma: None,
            threshold: None,
            seed_batch: 0,
            seed_params: 0,
            seed_fc: 0,
            seed_conv: 0,
            seed_defense: 0,
            out_dir: PathBuf::from("out"),
            threads: 1,
        }
    }
}

/// Parse a `key=value` override; the value is read as TOML and falls back to a string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| MkorError::InvalidConfig(format!("override {:?} is not key=value", s)))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", v))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Config file (optional) with `key=value` overrides applied on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| MkorError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| MkorError::format(p, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| MkorError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Variant::parse(&self.model)?;
        if self.classes == 0 || self.batch_size == 0 {
            return Err(MkorError::InvalidConfig(
                "classes and batch_size must be positive".into(),
            ));
        }
        if self.split != "train" && self.split != "test" {
            return Err(MkorError::InvalidConfig(format!("unknown split {:?}", self.split)));
        }
        if let Some(p) = &self.data_path {
            if !p.exists() {
                return Err(MkorError::DatasetUnavailable(p.display().to_string()));
            }
        }
        if let Some(p) = &self.calibration_reference {
            if !p.exists() {
                return Err(MkorError::InvalidConfig(format!(
                    "missing calibration reference {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        Variant::parse(&self.model).expect("validated")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant(),
            num_classes: self.classes,
            input_side: self.input_side,
            fc_hidden: self.fc_hidden.clone(),
            fc_bias: self.fc_bias,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let mut cfg = AttackConfig::new(self.model_config());
        cfg.param_seed = self.seed_params;
        cfg.fc_mode = self.fc_mode;
        cfg.fc = FcInjectConfig {
            alpha_range: (self.alpha_min, self.alpha_max),
            sigma: self.fc_sigma,
            jitter: self.fc_jitter,
            sink: self.sink.then(|| SinkConfig {
                class: self.sink_class,
                bias: self.sink_bias,
            }),
            bias_free_weight: 1.0,
            seed: self.seed_fc,
        };
        cfg.conv_mode = self.conv_mode;
        cfg.conv.beta = self.beta;
        cfg.conv.sigma = self.conv_sigma;
        cfg.conv.keep_band = self.conv_keep_band;
        cfg.conv.seed = self.seed_conv;
        cfg.conv_seed = self.seed_conv;
        cfg.conv_i = self.conv_i;
        cfg.defense = DefenseConfig {
            clip: self.clip,
            sigma_dp: self.sigma_dp,
            noise_scale: self.noise_scale,
            seed: self.seed_defense,
        };
        cfg.reconstruct = ReconstructConfig {
            fill: self.fill,
            calibration: self.calibration,
            gamma: self.gamma,
            threshold: self.threshold,
        };
        cfg.threads = self.threads;
        cfg
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            regime: self.regime,
            size: self.batch_size,
            n_max: self.n_max,
            class_probs: None,
            seed: self.seed_batch,
        }
    }

    pub fn load_dataset(&self) -> Result<Vec<LabeledImage>> {
        match self.dataset {
            DatasetSource::Mnist => {
                let dir = self.data_path.clone().unwrap_or_else(mnist_dir);
                load_mnist_dir(dir, self.split == "train")
            }
            DatasetSource::Cifar100 => {
                let file = match &self.data_path {
                    Some(p) => p.clone(),
                    None => cifar100_dir().join(if self.split == "train" { "train.bin" } else { "test.bin" }),
                };
                load_cifar100(file)
            }
            DatasetSource::PpmFolder => {
                let dir = self
                    .data_path
                    .as_ref()
                    .ok_or_else(|| MkorError::InvalidConfig("ppm-folder needs data_path".into()))?;
                load_image_folder(dir)
            }
            DatasetSource::Synth => {
                let mut data = synth_dataset(
                    self.classes,
                    self.synth_per_class,
                    self.synth_side,
                    self.synth_side,
                    self.synth_channels,
                    self.seed_batch,
                );
                if self.synth_border > 0 {
                    for d in &mut data {
                        zero_border(&mut d.image, self.synth_border)?;
                    }
                }
                Ok(data)
            }
        }
    }
}
