use anyhow::{bail, Result};
use clap::Args;
use serde::Serialize;

use hero_dp::accountant::{calibrate_sigma, AccountingMode, PrivacyLedger, PrivacyStep, PrivacySummary};

use crate::commands::print_privacy;
use crate::errors::UsageError;

#[derive(Debug, Args)]
pub struct AccountantCmd {
    /// Noise multiplier of every step; defaults to the calibrated value when --epsilon is given.
    #[arg(long, allow_negative_numbers = true, required_unless_present = "epsilon")]
    pub sigma: Option<f64>,
    /// Number of composed steps.
    #[arg(long)]
    pub steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    /// Report only this mode (paper-max, zcdp-sum or conservative).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Smallest guided scale relative to sigma, for the conservative mode.
    #[arg(long)]
    pub min_noise_ratio: Option<f64>,
    /// Target epsilon: also print the calibrated sigma.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sampling rate used by the calibration bound.
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    /// Constant of the calibration bound.
    #[arg(long, default_value_t = 1.0)]
    pub c2: f64,
    /// Print a single JSON object instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize)]
struct Report {
    sigma: f64,
    steps: u64,
    delta: f64,
    modes: Vec<PrivacySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibrated_sigma: Option<f64>,
    subsampling_amplification: bool,
}

pub fn run(cmd: &AccountantCmd) -> Result<()> {
    if cmd.steps == 0 {
        bail!(UsageError("--steps must be at least 1".into()));
    }
    if !(cmd.delta > 0.0 && cmd.delta < 1.0) {
        bail!(UsageError(format!("--delta must lie in (0, 1), got {}", cmd.delta)));
    }
    if !(cmd.clip > 0.0) {
        bail!(UsageError(format!("--clip must be > 0, got {}", cmd.clip)));
    }
    let calibrated = cmd
        .epsilon
        .map(|eps| calibrate_sigma(eps, cmd.delta, cmd.steps, cmd.q, cmd.c2))
        .transpose()
        .map_err(|e| UsageError(format!("calibration: {e}")))?;
    let sigma = match (cmd.sigma, calibrated) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => bail!(UsageError("--sigma or --epsilon is required".into())),
    };
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!(UsageError(format!("--sigma must be finite and >= 0, got {sigma}")));
    }
    let modes: Vec<AccountingMode> = match &cmd.mode {
        Some(m) => vec![m.parse().map_err(|e| UsageError(format!("--mode: {e}")))?],
        None => AccountingMode::ALL.to_vec(),
    };
    let step = match cmd.min_noise_ratio {
        Some(r) if !(0.0..=1.0).contains(&r) => {
            bail!(UsageError(format!("--min-noise-ratio must lie in [0, 1], got {r}")))
        }
        Some(r) => PrivacyStep::guided(sigma, cmd.clip, cmd.q, r),
        None => PrivacyStep::gaussian(sigma, cmd.clip, cmd.q),
    };
    let mut ledger = PrivacyLedger::new(cmd.delta, AccountingMode::default())?;
    ledger.steps = vec![step; cmd.steps as usize];
    let summaries: Vec<PrivacySummary> = modes.iter().map(|&m| ledger.summary(m)).collect();

    if cmd.json {
        let report = Report {
            sigma,
            steps: cmd.steps,
            delta: cmd.delta,
            modes: summaries,
            calibrated_sigma: calibrated,
            subsampling_amplification: false,
        };
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("sigma = {sigma}, steps = {}, delta = {:e}", cmd.steps, cmd.delta);
        print_privacy(&summaries, cmd.delta);
        if let Some(s) = calibrated {
            println!(
                "calibrated sigma for epsilon {} (q = {}, c2 = {}): {s:.6}",
                cmd.epsilon.unwrap_or_default(),
                cmd.q,
                cmd.c2
            );
        }
    }
    Ok(())
}
