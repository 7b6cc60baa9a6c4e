//! TOML configuration files.

use std::fs;
use std::path::Path;

use mfed_core::convergence::{self, ConvexTask, HarnessConfig, RateFn, RateSpec, StepRule};
use mfed_core::server::ExperimentConfig;
use serde::Deserialize;

use crate::CliError;

/// Config keys and the symbols they are usually written as.
const SYMBOLS: &[(&str, &str)] = &[
    ("rounds", "T"),
    ("local_epochs", "m"),
    ("learning_rate", "alpha"),
    ("clients_per_task", "N_k"),
    ("tasks", "K"),
    ("growth", "gamma"),
];

fn annotate(msg: String) -> String {
    let mut out = msg;
    for (key, symbol) in SYMBOLS {
        if out.contains(&format!("`{key}`")) {
            out.push_str(&format!(" (`{key}` is {symbol})"));
        }
    }
    out
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(anyhow::anyhow!("cannot read {}: {e}", path.display())))
}

/// Parses and validates an experiment config.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::config(anyhow::anyhow!(annotate(e.to_string()))))?;
    cfg.validate().map_err(|e| CliError::config(e.into()))?;
    Ok(cfg)
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, CliError> {
    parse_experiment(&read(path)?).map_err(|e| e.context(format!("config {}", path.display())))
}

/// Convex-suite settings for `rate-check`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateCheckConfig {
    pub seed: u64,
    /// Horizon `T`.
    pub rounds: usize,
    pub lambda: f64,
    pub local_steps: usize,
    /// Half-width of the uniform gradient noise.
    pub noise: f64,
    /// Monte-Carlo draws for the noisy run.
    pub draws: usize,
    pub tasks: usize,
    pub dim: usize,
    pub eig_lo: f64,
    pub eig_hi: f64,
    /// Replaces the theorem schedule with the constant step `step_scale / μ`.
    pub step_scale: Option<f64>,
    /// Overrides the ratio-condition constant `A`.
    pub a: Option<f64>,
}

impl Default for RateCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 1000,
            lambda: 0.1,
            local_steps: 1,
            noise: 0.5,
            draws: 200,
            tasks: 3,
            dim: 4,
            eig_lo: 1.0,
            eig_hi: 4.0,
            step_scale: None,
            a: None,
        }
    }
}

impl RateCheckConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::config(anyhow::anyhow!(msg)));
        if self.rounds < convergence::MIN_HORIZON {
            return bad(format!(
                "rounds (T) must be at least {} for a rate check, got {}",
                convergence::MIN_HORIZON,
                self.rounds
            ));
        }
        if self.local_steps < 1 || self.draws < 1 || self.tasks < 1 || self.dim < 1 {
            return bad("local_steps, draws, tasks and dim must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.noise >= 0.0) {
            return bad("lambda and noise must be >= 0".into());
        }
        if !(0.0 < self.eig_lo && self.eig_lo <= self.eig_hi) {
            return bad("eigenvalue range must satisfy 0 < eig_lo <= eig_hi".into());
        }
        if self.step_scale.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("step_scale must be positive".into());
        }
        Ok(())
    }

    pub fn rate_spec(&self) -> RateSpec {
        let mut spec = RateSpec::theorem(RateFn::InverseLinear, self.rounds);
        if let Some(a) = self.a {
            spec.a = a;
        }
        if let Some(c) = self.step_scale {
            spec.step = StepRule::Constant { c };
        }
        spec
    }

    pub fn suite(&self) -> Result<(Vec<ConvexTask>, HarnessConfig), CliError> {
        let (tasks, start) = convergence::random_suite(self.tasks, self.dim, self.eig_lo, self.eig_hi, self.seed)
            .map_err(|e| CliError::config(e.into()))?;
        let harness = HarnessConfig {
            lambda: self.lambda,
            local_steps: self.local_steps,
            noise: self.noise,
            draws: self.draws,
            rounds: self.rounds,
            seed: self.seed,
            start,
            fixed_global: None,
        };
        Ok((tasks, harness))
    }
}

pub fn parse_rate_check(text: &str) -> Result<RateCheckConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::config(anyhow::anyhow!(annotate(e.to_string()))))
}

pub fn load_rate_check(path: &Path) -> Result<RateCheckConfig, CliError> {
    parse_rate_check(&read(path)?).map_err(|e| e.context(format!("config {}", path.display())))
}
