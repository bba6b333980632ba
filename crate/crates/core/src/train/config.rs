use std::fmt;
use std::str::FromStr;

use crate::abra::AdvOptState;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Erm,
    Adabn,
    Advstyle,
    Abra,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::Adabn, Method::Advstyle, Method::Abra];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Adabn => "adabn",
            Method::Advstyle => "advstyle",
            Method::Abra => "abra",
        }
    }

    /// Inference mode used when reporting this method.
    pub fn default_mode(self) -> InferMode {
        match self {
            Method::Adabn => InferMode::Tta,
            _ => InferMode::Plain,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?} (expected erm|adabn|advstyle|abra)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InferMode {
    /// Frozen running statistics.
    Plain,
    /// Recalibrate BN statistics on the plate first.
    Tta,
}

impl InferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferMode::Plain => "plain",
            InferMode::Tta => "tta",
        }
    }
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(InferMode::Plain),
            "tta" => Ok(InferMode::Tta),
            _ => Err(Error::config("mode", format!("unknown mode {s:?} (expected plain|tta)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached after warmup.
    pub lr: f64,
    /// Fraction of epochs over which the rate ramps linearly up to `lr`.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    /// Block indices after which the statistics perturbation is applied.
    pub sites: Vec<usize>,
    pub ascent_steps: usize,
    /// Ascent step size; `None` follows the descent schedule.
    pub ascent_lr: Option<f64>,
    pub seed: u64,
    /// Random flips and quarter turns of training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Abra,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 1e-5,
            loss: LossConfig::default(),
            sites: vec![2],
            ascent_steps: 1,
            ascent_lr: None,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", format!("{} not in [0, 1]", self.warmup_frac)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        self.loss.validate()?;
        if matches!(self.method, Method::Abra | Method::Advstyle) && self.sites.is_empty() {
            return Err(Error::config("sites", "at least one insertion site is required"));
        }
        AdvOptState {
            alpha: self.ascent_lr.unwrap_or(self.lr),
            steps: self.ascent_steps,
        }
        .validate()
    }
}
