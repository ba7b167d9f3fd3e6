//! Plain-text run configuration.
//!
//! One `key = value` per line; blank lines and lines starting with `#` are
//! skipped. Every key has a default, so an empty file is valid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataprep::DEFAULT_DILATION_RADIUS;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::network::NetworkConfig;
use crate::sampler::DEFAULT_SWITCH_AT;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub corrector_steps: usize,
    pub switch_at: usize,
    pub dilation_radius: usize,
    pub histogram_bins: usize,
    pub extractor_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            epochs: 100,
            max_steps: None,
            corrector_steps: 0,
            switch_at: DEFAULT_SWITCH_AT,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            histogram_bins: 20,
            extractor_seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "channels",
    "depth",
    "fourier_dim",
    "fourier_seed",
    "image_size",
    "steps",
    "lambda",
    "batch_size",
    "grad_clip",
    "learning_rate",
    "lookahead_alpha",
    "lookahead_k",
    "n_sma_threshold",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "epochs",
    "max_steps",
    "corrector_steps",
    "switch_at",
    "dilation_radius",
    "histogram_bins",
    "extractor_seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("cannot parse {key} = {value:?}"))
}

impl RunConfig {
    /// Sets one key. `grad_clip = 0` disables clipping and `max_steps = 0`
    /// removes the step limit.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let opt = &mut self.train.optimizer;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "channels" => self.network.channels = parse(key, v)?,
            "depth" => self.network.depth = parse(key, v)?,
            "fourier_dim" => self.network.fourier_dim = parse(key, v)?,
            "fourier_seed" => self.network.fourier_seed = parse(key, v)?,
            "image_size" => self.network.image_size = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "grad_clip" => {
                let c: f64 = parse(key, v)?;
                self.train.grad_clip = (c != 0.0).then_some(c);
            }
            "learning_rate" => opt.learning_rate = parse(key, v)?,
            "lookahead_alpha" => opt.lookahead_alpha = parse(key, v)?,
            "lookahead_k" => opt.lookahead_k = parse(key, v)?,
            "n_sma_threshold" => opt.n_sma_threshold = parse(key, v)?,
            "beta1" => opt.beta1 = parse(key, v)?,
            "beta2" => opt.beta2 = parse(key, v)?,
            "eps" => opt.eps = parse(key, v)?,
            "weight_decay" => opt.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => {
                let s: u64 = parse(key, v)?;
                self.max_steps = (s != 0).then_some(s);
            }
            "corrector_steps" => self.corrector_steps = parse(key, v)?,
            "switch_at" => self.switch_at = parse(key, v)?,
            "dilation_radius" => self.dilation_radius = parse(key, v)?,
            "histogram_bins" => self.histogram_bins = parse(key, v)?,
            "extractor_seed" => self.extractor_seed = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::parse(std::str::from_utf8(&bytes).map_err(|_| Error::format("config", "not UTF-8"))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.histogram_bins == 0 {
            return Err(Error::invalid("histogram_bins must be at least 1"));
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let opt = &self.train.optimizer;
        match key {
            "seed" => self.seed.to_string(),
            "channels" => self.network.channels.to_string(),
            "depth" => self.network.depth.to_string(),
            "fourier_dim" => self.network.fourier_dim.to_string(),
            "fourier_seed" => self.network.fourier_seed.to_string(),
            "image_size" => self.network.image_size.to_string(),
            "steps" => self.train.steps.to_string(),
            "lambda" => self.train.lambda.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "grad_clip" => self.train.grad_clip.unwrap_or(0.0).to_string(),
            "learning_rate" => opt.learning_rate.to_string(),
            "lookahead_alpha" => opt.lookahead_alpha.to_string(),
            "lookahead_k" => opt.lookahead_k.to_string(),
            "n_sma_threshold" => opt.n_sma_threshold.to_string(),
            "beta1" => opt.beta1.to_string(),
            "beta2" => opt.beta2.to_string(),
            "eps" => opt.eps.to_string(),
            "weight_decay" => opt.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.unwrap_or(0).to_string(),
            "corrector_steps" => self.corrector_steps.to_string(),
            "switch_at" => self.switch_at.to_string(),
            "dilation_radius" => self.dilation_radius.to_string(),
            "histogram_bins" => self.histogram_bins.to_string(),
            "extractor_seed" => self.extractor_seed.to_string(),
            _ => unreachable!("KEYS and value() disagree on {key}"),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.value(key))?;
        }
        Ok(())
    }
}
