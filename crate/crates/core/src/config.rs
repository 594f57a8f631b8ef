//! Run configuration (JSON) with defaults and fail-fast validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DurationMaskSpec, LossSpec, LossWeights, PoolingSpec};
use crate::pipeline::ModelSpec;
use crate::spotting::SpotConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MCWES_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Videos drawn from each batch for feature-consistency pairs.
    pub pair_count: usize,
    /// Snippets per training video after subsampling.
    pub t_train: usize,
    pub seed: u64,
    /// Expected snippet length; every video must agree when set.
    pub g: Option<usize>,
    /// Expected frame rate; every video must agree when set.
    pub fps: Option<f64>,
    /// Fraction of videos held out by the single-split workflow.
    pub holdout_fraction: f64,
    pub model: ModelSpec,
    pub pooling: PoolingSpec,
    pub duration: DurationMaskSpec,
    pub weights: LossWeights,
    pub spot: SpotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learning_rate: 0.0005,
            iterations: 1000,
            batch_size: 10,
            pair_count: 6,
            t_train: 250,
            seed: 0,
            g: None,
            fps: None,
            holdout_fraction: 0.2,
            model: ModelSpec::default(),
            pooling: PoolingSpec::default(),
            duration: DurationMaskSpec::default(),
            weights: LossWeights::default(),
            spot: SpotConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::from_json(&text)?;
        config.apply_env()?;
        Ok(config)
    }

    /// Defaults plus the environment override.
    pub fn from_env() -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_env()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            pooling: self.pooling,
            duration: self.duration,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.batch_size < self.pair_count {
            return bad(format!(
                "batch_size ({}) must be >= 1 and >= pair_count ({})",
                self.batch_size, self.pair_count
            ));
        }
        if self.t_train <= self.duration.eta {
            return bad(format!(
                "t_train ({}) must exceed the duration window eta ({})",
                self.t_train, self.duration.eta
            ));
        }
        if self.g == Some(0) || self.fps.is_some_and(|f| !(f > 0.0)) {
            return bad("g and fps must be positive when given".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction));
        }
        self.model.validate()?;
        self.loss_spec().validate()?;
        self.spot.validate()
    }
}
