//! The experiment config file: TOML sections mirroring every runtime knob.
//!
//! Parsing is strict (unknown keys are rejected, with the key named in the
//! error) and every file fully validates before a run starts. The resolved
//! config serializes back to TOML so commands can echo exactly what they ran
//! with and checkpoints can embed it.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::losses::{LossConfig, LossMode, TargetShape};
use crate::modem::ModulationKind;
use crate::networks::{DemodulatorConfig, ModulatorConfig};
use crate::tensor::optim::AdaBeliefConfig;
use crate::training::{TrainConfig, TrainError};

#[derive(Debug)]
pub enum ConfigError {
    /// Malformed file or unknown key; the detail names the key.
    Parse { detail: String },
    /// Well-formed but invalid values; the detail names the key.
    Invalid { detail: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Parse { detail } => write!(f, "config parse: {}", detail),
            ConfigError::Invalid { detail } => write!(f, "config: {}", detail),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    Bpsk,
    Qpsk,
}

impl From<Modulation> for ModulationKind {
    fn from(m: Modulation) -> Self {
        match m {
            Modulation::Bpsk => ModulationKind::Bpsk,
            Modulation::Qpsk => ModulationKind::Qpsk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Base,
    MseAux,
    Shape,
}

impl From<Mode> for LossMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Base => LossMode::Base,
            Mode::MseAux => LossMode::MseAux,
            Mode::Shape => LossMode::Shape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeTargetSection {
    Ring { r: f64, width: f64 },
    Ellipse { a: f64, b: f64 },
    QpskCloud { sigma: f64 },
}

impl From<ShapeTargetSection> for TargetShape {
    fn from(s: ShapeTargetSection) -> Self {
        match s {
            ShapeTargetSection::Ring { r, width } => TargetShape::Ring { r, width },
            ShapeTargetSection::Ellipse { a, b } => TargetShape::Ellipse { a, b },
            ShapeTargetSection::QpskCloud { sigma } => TargetShape::QpskCloud { sigma },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset_size: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub modulation: Modulation,
    pub length_a: usize,
    pub length_b: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            dataset_size: d.dataset_size,
            train_fraction: d.train_fraction,
            batch_size: d.batch_size,
            epochs: d.epochs,
            modulation: Modulation::Bpsk,
            length_a: d.length_a,
            length_b: d.length_b,
            grad_clip: d.grad_clip,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = AdaBeliefConfig::default();
        OptimizerSection {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            snr_low_db: 5.0,
            snr_high_db: 15.0,
            fixed_snr_db: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_target: Option<ShapeTargetSection>,
    pub shape_sample_n: usize,
    pub shape_sample_m: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        LossSection {
            mode: Mode::Base,
            alpha: d.alpha,
            beta: d.beta,
            shape_target: None,
            shape_sample_n: d.shape_sample_n,
            shape_sample_m: d.shape_sample_m,
        }
    }
}

/// Architecture constants; accepted in the file for completeness but pinned
/// to the only values this build implements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulatorSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ModulatorSection {
    fn default() -> Self {
        ModulatorSection {
            d_model: ModulatorConfig::D_MODEL,
            layers: ModulatorConfig::LAYERS,
            heads: ModulatorConfig::HEADS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemodulatorSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for DemodulatorSection {
    fn default() -> Self {
        DemodulatorSection {
            d_model: DemodulatorConfig::D_MODEL,
            layers: DemodulatorConfig::LAYERS,
            heads: DemodulatorConfig::HEADS,
            hidden: DemodulatorConfig::HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainSection,
    pub optimizer: OptimizerSection,
    pub channel: ChannelSection,
    pub loss: LossSection,
    pub modulator: ModulatorSection,
    pub demodulator: DemodulatorSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            detail: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Check the pinned architecture constants and every runtime value.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pins = [
            ("modulator.d_model", self.modulator.d_model, ModulatorConfig::D_MODEL),
            ("modulator.layers", self.modulator.layers, ModulatorConfig::LAYERS),
            ("modulator.heads", self.modulator.heads, ModulatorConfig::HEADS),
            ("demodulator.d_model", self.demodulator.d_model, DemodulatorConfig::D_MODEL),
            ("demodulator.layers", self.demodulator.layers, DemodulatorConfig::LAYERS),
            ("demodulator.heads", self.demodulator.heads, DemodulatorConfig::HEADS),
            ("demodulator.hidden", self.demodulator.hidden, DemodulatorConfig::HIDDEN),
        ];
        for (key, got, want) in pins {
            if got != want {
                return Err(ConfigError::Invalid {
                    detail: format!("{}: this build implements only {}, got {}", key, want, got),
                });
            }
        }
        self.to_train_config().validate().map_err(|e| match e {
            TrainError::Config { detail } => ConfigError::Invalid { detail },
            other => ConfigError::Invalid {
                detail: other.to_string(),
            },
        })
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            dataset_size: self.train.dataset_size,
            train_fraction: self.train.train_fraction,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            modulation: self.train.modulation.into(),
            length_a: self.train.length_a,
            length_b: self.train.length_b,
            channel: ChannelConfig {
                snr_low_db: self.channel.snr_low_db,
                snr_high_db: self.channel.snr_high_db,
                fixed_snr_db: self.channel.fixed_snr_db,
                seed: self.channel.seed,
            },
            loss: LossConfig {
                mode: self.loss.mode.into(),
                alpha: self.loss.alpha,
                beta: self.loss.beta,
                shape_target: self.loss.shape_target.map(Into::into),
                shape_sample_n: self.loss.shape_sample_n,
                shape_sample_m: self.loss.shape_sample_m,
            },
            optimizer: AdaBeliefConfig {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            grad_clip: self.train.grad_clip,
            seed: self.train.seed,
        }
    }
}
