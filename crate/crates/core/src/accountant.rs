//! zCDP privacy bookkeeping.
//!
//! Conventions: `sigma` is a unitless noise multiplier, the noise standard
//! deviation is `sigma * clip` and the sensitivity of the clipped sum is
//! `clip`, so one Gaussian step is `1 / (2 sigma²)`-zCDP. Subsampling
//! amplification is never applied; the sampling rate is recorded only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-step zCDP parameters are combined over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountingMode {
    /// `max_t rho_t`, the composition rule as stated for DP-Hero.
    PaperMax,
    /// `Σ_t rho_t`, standard zCDP additivity.
    #[default]
    ZcdpSum,
    /// `Σ_t rho_eff_t` where `rho_eff` uses the weakest guided-noise direction.
    Conservative,
}

impl AccountingMode {
    pub const ALL: [AccountingMode; 3] = [
        AccountingMode::PaperMax,
        AccountingMode::ZcdpSum,
        AccountingMode::Conservative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AccountingMode::PaperMax => "paper-max",
            AccountingMode::ZcdpSum => "zcdp-sum",
            AccountingMode::Conservative => "conservative",
        }
    }
}

impl std::str::FromStr for AccountingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AccountingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown accounting mode '{s}'")))
    }
}

/// One step's privacy-relevant parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyStep {
    /// `None` when the step added no noise and so has no guarantee.
    pub rho: Option<f64>,
    pub sigma: f64,
    pub clip: f64,
    pub q: f64,
    /// Smallest guided scale relative to `sigma` (`min_i v_i / sigma`);
    /// `None` for isotropic noise.
    pub min_noise_ratio: Option<f64>,
}

impl PrivacyStep {
    /// Step of the Gaussian mechanism with multiplier `sigma`; `sigma = 0` records no guarantee.
    pub fn gaussian(sigma: f64, clip: f64, q: f64) -> Self {
        PrivacyStep {
            rho: step_rho(sigma, clip).ok(),
            sigma,
            clip,
            q,
            min_noise_ratio: None,
        }
    }

    pub fn guided(sigma: f64, clip: f64, q: f64, min_noise_ratio: f64) -> Self {
        PrivacyStep {
            min_noise_ratio: Some(min_noise_ratio),
            ..PrivacyStep::gaussian(sigma, clip, q)
        }
    }

    /// A step that released information without any noise.
    pub fn unprotected(clip: f64, q: f64) -> Self {
        PrivacyStep {
            rho: None,
            sigma: 0.0,
            clip,
            q,
            min_noise_ratio: None,
        }
    }

    fn conservative_rho(&self) -> Result<f64> {
        self.rho
            .ok_or_else(|| Error::UnboundedPrivacy("a step added no noise".into()))?;
        let ratio = self.min_noise_ratio.unwrap_or(1.0);
        step_rho(ratio * self.sigma, self.clip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub steps: Vec<PrivacyStep>,
    pub delta: f64,
    pub mode: AccountingMode,
}

/// Composed guarantee under one accounting mode; `None` fields mean unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub mode: AccountingMode,
    pub rho_total: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub steps: usize,
}

impl PrivacyLedger {
    pub fn new(delta: f64, mode: AccountingMode) -> Result<Self> {
        check_delta(delta)?;
        Ok(PrivacyLedger {
            steps: Vec::new(),
            delta,
            mode,
        })
    }

    pub fn push(&mut self, step: PrivacyStep) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Composed `rho` under the ledger's own mode.
    pub fn rho_total(&self) -> Result<f64> {
        compose_with(self, self.mode)
    }

    /// `(ε, δ)` guarantee under the ledger's own mode.
    pub fn epsilon(&self) -> Result<f64> {
        Ok(zcdp_to_dp(self.rho_total()?, self.delta))
    }

    pub fn summary(&self, mode: AccountingMode) -> PrivacySummary {
        let rho_total = compose_with(self, mode).ok();
        PrivacySummary {
            mode,
            rho_total,
            epsilon: rho_total.map(|r| zcdp_to_dp(r, self.delta)),
            delta: self.delta,
            steps: self.steps.len(),
        }
    }

    /// Summaries for every accounting mode, in `AccountingMode::ALL` order.
    pub fn summaries(&self) -> Vec<PrivacySummary> {
        AccountingMode::ALL.iter().map(|&m| self.summary(m)).collect()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Per-step zCDP parameter `rho = clip² / (2 (sigma clip)²) = 1 / (2 sigma²)`.
pub fn step_rho(sigma: f64, clip: f64) -> Result<f64> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(Error::validation(format!("clip must be positive, got {clip}")));
    }
    if sigma == 0.0 {
        return Err(Error::UnboundedPrivacy("sigma = 0 adds no noise".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    let std = sigma * clip;
    Ok(clip * clip / (2.0 * std * std))
}

/// Composes the ledger under its own mode.
pub fn compose(ledger: &PrivacyLedger) -> Result<f64> {
    compose_with(ledger, ledger.mode)
}

pub fn compose_with(ledger: &PrivacyLedger, mode: AccountingMode) -> Result<f64> {
    if ledger.steps.is_empty() {
        return Err(Error::validation("cannot compose an empty ledger"));
    }
    let mut rhos = ledger.steps.iter().map(|s| {
        s.rho
            .ok_or_else(|| Error::UnboundedPrivacy("a step added no noise".into()))
    });
    match mode {
        AccountingMode::PaperMax => rhos.try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r))),
        AccountingMode::ZcdpSum => rhos.sum(),
        AccountingMode::Conservative => ledger.steps.iter().map(PrivacyStep::conservative_rho).sum(),
    }
}

/// `ε = rho + 2 sqrt(rho ln(1/δ))`.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

/// `ε = eps_rdp + ln(1/δ) / (α - 1)`.
pub fn rdp_to_dp(alpha: f64, eps_rdp: f64, delta: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::validation(format!("Renyi order must exceed 1, got {alpha}")));
    }
    check_delta(delta).or_else(|e| if delta == 1.0 { Ok(()) } else { Err(e) })?;
    Ok(eps_rdp + (1.0 / delta).ln() / (alpha - 1.0))
}

/// Smallest `sigma` with `sigma >= c2 q sqrt(T ln(1/δ)) / ε`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, steps: u64, q: f64, c2: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::validation(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::validation(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if steps == 0 || !(c2 > 0.0) {
        return Err(Error::validation("steps and c2 must be positive"));
    }
    Ok(c2 * q * (steps as f64 * (1.0 / delta).ln()).sqrt() / epsilon)
}

/// `D_α(N(μ1, σ²) ‖ N(μ2, σ²)) = α (μ1 - μ2)² / (2 σ²)`.
pub fn renyi_divergence_gaussians(mu1: f64, mu2: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    if !(alpha > 1.0) {
        return Err(Error::validation(format!("Renyi order must exceed 1, got {alpha}")));
    }
    let d = mu1 - mu2;
    Ok(alpha * d * d / (2.0 * sigma * sigma))
}
