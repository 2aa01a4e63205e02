//! Training configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors. Omitted keys keep their defaults.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::loss::LatentVariant;
use crate::model::Activation;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("invalid configuration: `{key}` {message}")]
    Invalid { key: &'static str, message: String },
}

/// Which networks a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Encoder, decoder, generator and critic.
    Avae,
    /// Encoder and decoder only.
    Vae,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HiddenActivation {
    Tanh,
    LeakyRelu,
}

impl HiddenActivation {
    pub fn activation(self) -> Activation {
        match self {
            HiddenActivation::Tanh => Activation::Tanh,
            HiddenActivation::LeakyRelu => Activation::LeakyRelu(0.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dim_x: usize,
    pub dim_z: usize,
    pub dim_xi: usize,
    pub use_xi: bool,
    pub hidden_width: usize,
    pub hidden_activation: HiddenActivation,
    pub init_std: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta_kl: f64,
    pub loss_variant: LatentVariant,
    pub lz_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            mode: Mode::Avae,
            dim_x: 2,
            dim_z: 1,
            dim_xi: 1,
            use_xi: true,
            hidden_width: 128,
            hidden_activation: HiddenActivation::Tanh,
            init_std: 0.02,
            batch_size: 64,
            iterations: 20_000,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            beta_kl: 1.0,
            loss_variant: LatentVariant::B,
            lz_weight: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "mode",
    "dim_x",
    "dim_z",
    "dim_xi",
    "use_xi",
    "hidden_width",
    "hidden_activation",
    "init_std",
    "batch_size",
    "iterations",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "beta_kl",
    "loss_variant",
    "lz_weight",
    "seed",
    "checkpoint_every",
];

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Width of the generator input: `dim_z`, plus `dim_xi` when ξ is used.
    pub fn generator_input(&self) -> usize {
        if self.use_xi {
            self.dim_z + self.dim_xi
        } else {
            self.dim_z
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("dim_x", self.dim_x),
            ("dim_z", self.dim_z),
            ("dim_xi", self.dim_xi),
            ("hidden_width", self.hidden_width),
            ("batch_size", self.batch_size),
        ];
        for (key, value) in counts {
            if value < 1 {
                return Err(ConfigError::Invalid {
                    key,
                    message: "must be at least 1".into(),
                });
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("init_std", self.init_std),
            ("adam_eps", self.adam_eps),
        ];
        for (key, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::Invalid {
                    key,
                    message: format!("must be positive, got {value}"),
                });
            }
        }
        for (key, value) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(ConfigError::Invalid {
                    key,
                    message: format!("must lie in [0, 1), got {value}"),
                });
            }
        }
        for (key, value) in [("beta_kl", self.beta_kl), ("lz_weight", self.lz_weight)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::Invalid {
                    key,
                    message: format!("must be non-negative, got {value}"),
                });
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "mode" => {
                self.mode = match value {
                    "avae" => Mode::Avae,
                    "vae" => Mode::Vae,
                    _ => return Err(format!("`{value}` is not one of avae, vae")),
                }
            }
            "dim_x" => self.dim_x = parse_num(value)?,
            "dim_z" => self.dim_z = parse_num(value)?,
            "dim_xi" => self.dim_xi = parse_num(value)?,
            "use_xi" => self.use_xi = parse_num(value)?,
            "hidden_width" => self.hidden_width = parse_num(value)?,
            "hidden_activation" => {
                self.hidden_activation = match value {
                    "tanh" => HiddenActivation::Tanh,
                    "leaky_relu" => HiddenActivation::LeakyRelu,
                    _ => return Err(format!("`{value}` is not one of tanh, leaky_relu")),
                }
            }
            "init_std" => self.init_std = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "iterations" => self.iterations = parse_num(value)?,
            "learning_rate" => self.learning_rate = parse_num(value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(value)?,
            "adam_eps" => self.adam_eps = parse_num(value)?,
            "beta_kl" => self.beta_kl = parse_num(value)?,
            "loss_variant" => {
                self.loss_variant = match value {
                    "a" => LatentVariant::A,
                    "b" => LatentVariant::B,
                    _ => return Err(format!("`{value}` is not one of a, b")),
                }
            }
            "lz_weight" => self.lz_weight = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(value)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Parses and validates a configuration.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            cfg.set(known, value).map_err(|message| ConfigError::Value {
                line,
                key: key.to_string(),
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            Mode::Avae => "avae",
            Mode::Vae => "vae",
        };
        let act = match self.hidden_activation {
            HiddenActivation::Tanh => "tanh",
            HiddenActivation::LeakyRelu => "leaky_relu",
        };
        let _ = writeln!(out, "mode = {mode}");
        let _ = writeln!(out, "dim_x = {}", self.dim_x);
        let _ = writeln!(out, "dim_z = {}", self.dim_z);
        let _ = writeln!(out, "dim_xi = {}", self.dim_xi);
        let _ = writeln!(out, "use_xi = {}", self.use_xi);
        let _ = writeln!(out, "hidden_width = {}", self.hidden_width);
        let _ = writeln!(out, "hidden_activation = {act}");
        let _ = writeln!(out, "init_std = {:?}", self.init_std);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(out, "adam_beta1 = {:?}", self.adam_beta1);
        let _ = writeln!(out, "adam_beta2 = {:?}", self.adam_beta2);
        let _ = writeln!(out, "adam_eps = {:?}", self.adam_eps);
        let _ = writeln!(out, "beta_kl = {:?}", self.beta_kl);
        let _ = writeln!(out, "loss_variant = {}", self.loss_variant.name());
        let _ = writeln!(out, "lz_weight = {:?}", self.lz_weight);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        out
    }
}
