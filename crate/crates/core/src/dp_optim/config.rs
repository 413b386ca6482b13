use serde::{Deserialize, Serialize};

use crate::accountant::AccountingMode;
use crate::data::SamplingMode;
use crate::error::{Error, Result};
use crate::guidance::GuidanceScope;
use crate::nn::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain minibatch SGD, no clipping or noise.
    Sgd,
    /// Per-example clipping plus isotropic Gaussian noise.
    DpSgd,
    /// Per-example clipping plus model-guided Gaussian noise.
    DpHero,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::DpSgd => "dp-sgd",
            OptimizerKind::DpHero => "dp-hero",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [OptimizerKind::Sgd, OptimizerKind::DpSgd, OptimizerKind::DpHero]
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer '{s}'")))
    }
}

fn default_guidance_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_delta() -> f64 {
    1e-5
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub arch: Architecture,
    /// Noise multiplier; noise std is `sigma * clip` when coupling is on.
    pub sigma: f64,
    pub clip: f64,
    pub lot_size: usize,
    pub eta: f64,
    /// Number of epochs; ignored when `steps` is set.
    #[serde(default)]
    pub epochs: usize,
    /// Explicit step count, overriding `epochs`.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub accounting: AccountingMode,
    #[serde(default)]
    pub guidance_scope: GuidanceScope,
    /// Recompute guidance every this many steps (staleness cadence).
    #[serde(default = "default_guidance_every")]
    pub guidance_every: usize,
    /// Scale the noise by the clip norm.
    #[serde(default = "default_true")]
    pub noise_clip_coupling: bool,
    #[serde(default)]
    pub sampling: SamplingMode,
    /// Evaluate after each of the first 30 steps as well as every epoch.
    #[serde(default)]
    pub trace_initial: bool,
    /// Record wall-clock time in step records (otherwise zero, keeping output reproducible).
    #[serde(default)]
    pub timing: bool,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, arch: Architecture) -> Self {
        TrainConfig {
            optimizer,
            arch,
            sigma: 1.0,
            clip: 1.0,
            lot_size: 200,
            eta: 0.1,
            epochs: 1,
            steps: None,
            delta: default_delta(),
            seed: 0,
            accounting: AccountingMode::default(),
            guidance_scope: GuidanceScope::default(),
            guidance_every: 1,
            noise_clip_coupling: true,
            sampling: SamplingMode::default(),
            trace_initial: false,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return bad(format!("clip must be finite and > 0, got {}", self.clip));
        }
        if self.lot_size == 0 {
            return bad("lot size must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("learning rate must be finite and > 0, got {}", self.eta));
        }
        if self.guidance_every == 0 {
            return bad("guidance cadence must be at least 1".into());
        }
        self.arch.param_specs()?;
        Ok(())
    }

    /// Standard deviation of the injected noise per unit of guided/isotropic scale.
    pub fn noise_std(&self) -> f64 {
        if self.noise_clip_coupling {
            self.sigma * self.clip
        } else {
            self.sigma
        }
    }

    /// Noise multiplier relative to the sensitivity `clip`, as seen by the accountant.
    pub fn effective_multiplier(&self) -> f64 {
        self.noise_std() / self.clip
    }
}
