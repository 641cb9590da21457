//! Training configuration, readable from TOML with field names as below.

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::losses::VatConfig;
use crate::model::ModelConfig;
use crate::windowing::Dims3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Fraction of cases used for training; the rest validates.
    pub split_fraction: f64,
    /// Training crop, `[D, H, W]`; must equal `model.input_dims`.
    pub crop_size: Dims3,
    pub clip: bool,
    /// Lower and upper intensity percentiles used when `clip` is set.
    pub clip_percentiles: [f64; 2],
    /// Save a numbered checkpoint every this many epochs (0: only the best one).
    pub checkpoint_every: usize,
    /// Validate every this many epochs.
    pub validate_every: usize,
    pub vat: VatConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            lr: 1e-4,
            batch_size: 1,
            epochs: 100,
            poly_power: 0.9,
            seed: 0,
            split_fraction: 0.8,
            crop_size: model.input_dims,
            clip: true,
            clip_percentiles: [0.5, 99.5],
            checkpoint_every: 0,
            validate_every: 1,
            vat: VatConfig::default(),
            model,
        }
    }
}

impl TrainConfig {
    /// Full-size network and 128³ crops.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        Self {
            crop_size: model.input_dims,
            model,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn clip_range(&self) -> Option<[f64; 2]> {
        self.clip.then_some(self.clip_percentiles)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return bad("batch_size, epochs and validate_every must be positive".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            ));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return bad(format!(
                "poly_power {} must be non-negative",
                self.poly_power
            ));
        }
        let [lo, hi] = self.clip_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return bad(format!("clip percentiles ({lo}, {hi}) invalid"));
        }
        if self.crop_size != self.model.input_dims {
            return bad(format!(
                "crop_size {:?} must equal model.input_dims {:?}",
                self.crop_size, self.model.input_dims
            ));
        }
        self.model.validate()?;
        self.vat.validate()?;
        Ok(())
    }
}
