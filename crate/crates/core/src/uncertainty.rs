//! Monte-Carlo dropout aggregation, temperature calibration and intervals.

use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::fusion::GaussianPrediction;
use crate::stats::{mean, mix_seed, std_dev, z_value};
use crate::tokenizer::TokenSequence;

/// Lower bound on the fitted log-temperature.
pub const LOG_TAU_FLOOR: f64 = -6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub passes: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { passes: 20, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub log_tau: f64,
    pub fitted_on: String,
    pub fit_nll: f64,
}

impl Default for CalibrationState {
    fn default() -> Self {
        CalibrationState {
            log_tau: 0.0,
            fitted_on: "none".into(),
            fit_nll: 0.0,
        }
    }
}

impl CalibrationState {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// `exp(2 log_tau) * var`.
    pub fn apply(&self, var: f64) -> f64 {
        (2.0 * self.log_tau).exp() * var
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainPrediction {
    pub mu: f64,
    pub var: f64,
    pub var_cal: f64,
    pub sample_mus: Vec<f64>,
    pub sample_vars: Vec<f64>,
    /// Spread of the sampled means. Diagnostic only; not part of `var`.
    pub mc_std: f64,
}

/// A model that can be run once under a dropout mode with a given RNG seed.
pub trait StochasticRegressor {
    fn sample(&self, seq: &TokenSequence, mode: Mode, seed: u64) -> Result<GaussianPrediction>;
}

/// Arithmetic means of the sampled `mu` and `sigma^2`, then temperature scaling.
pub fn aggregate(samples: &[GaussianPrediction], calib: &CalibrationState) -> UncertainPrediction {
    let sample_mus: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let sample_vars: Vec<f64> = samples.iter().map(|s| s.var()).collect();
    let mu = mean(&sample_mus);
    let var = mean(&sample_vars);
    UncertainPrediction {
        mu,
        var,
        var_cal: calib.apply(var),
        mc_std: std_dev(&sample_mus),
        sample_mus,
        sample_vars,
    }
}

fn sequence_key(seq: &TokenSequence) -> u64 {
    mix_seed(
        seq.ids.len() as u64,
        &seq.ids.iter().map(|&i| i as u64).collect::<Vec<_>>(),
    )
}

/// Dropout seed of MC pass `t` for `seq`.
pub fn pass_seed(mc: &McConfig, seq: &TokenSequence, t: usize) -> u64 {
    mix_seed(mc.seed, &[sequence_key(seq), t as u64])
}

/// Runs `mc.passes` dropout-active forward passes. Pass `t` draws from a
/// stream derived from `(mc.seed, input, t)`, so results do not depend on
/// call order.
pub fn mc_predict(
    model: &impl StochasticRegressor,
    seq: &TokenSequence,
    mc: &McConfig,
    calib: &CalibrationState,
) -> Result<UncertainPrediction> {
    if mc.passes < 1 {
        return Err(Error::Config("MC passes must be at least 1".into()));
    }
    let samples = (0..mc.passes)
        .map(|t| model.sample(seq, Mode::EvalMc, pass_seed(mc, seq, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&samples, calib))
}

fn check_calibration_input(preds: &[(f64, f64)], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::Input("calibration needs at least 2 samples".into()));
    }
    if let Some((i, _)) = preds.iter().enumerate().find(|(_, p)| !(p.1 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Input(format!("variance at index {i} is not positive")));
    }
    Ok(())
}

/// Mean NLL of `(mu, var)` pairs after scaling variances by `exp(2 log_tau)`.
pub fn calibration_nll(preds: &[(f64, f64)], targets: &[f64], log_tau: f64) -> f64 {
    let s = (2.0 * log_tau).exp();
    preds
        .iter()
        .zip(targets)
        .map(|(&(m, v), &y)| {
            let var_cal = v * s;
            (y - m).powi(2) / (2.0 * var_cal) + 0.5 * var_cal.ln()
        })
        .sum::<f64>()
        / preds.len() as f64
}

/// d(calibration_nll)/d(log_tau) = mean(1 - r^2 / (sigma^2 exp(2 log_tau))).
pub fn calibration_nll_grad(preds: &[(f64, f64)], targets: &[f64], log_tau: f64) -> f64 {
    let inv = (-2.0 * log_tau).exp();
    preds
        .iter()
        .zip(targets)
        .map(|(&(m, v), &y)| 1.0 - (y - m).powi(2) / v * inv)
        .sum::<f64>()
        / preds.len() as f64
}

/// Fits `log_tau` in closed form: `tau^2 = mean((y - mu)^2 / sigma^2)`,
/// floored at [`LOG_TAU_FLOOR`].
pub fn calibrate_temperature(
    preds: &[(f64, f64)],
    targets: &[f64],
    fitted_on: impl Into<String>,
) -> Result<CalibrationState> {
    check_calibration_input(preds, targets)?;
    let tau_sq = preds
        .iter()
        .zip(targets)
        .map(|(&(m, v), &y)| (y - m).powi(2) / v)
        .sum::<f64>()
        / preds.len() as f64;
    let log_tau = if tau_sq > 0.0 {
        (0.5 * tau_sq.ln()).max(LOG_TAU_FLOOR)
    } else {
        LOG_TAU_FLOOR
    };
    Ok(CalibrationState {
        log_tau,
        fitted_on: fitted_on.into(),
        fit_nll: calibration_nll(preds, targets, log_tau),
    })
}

/// Central interval `mu +- z * sqrt(var_cal)` at confidence `alpha`.
pub fn predictive_interval(mu: f64, var_cal: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(var_cal >= 0.0) {
        return Err(Error::Input(format!("variance {var_cal} is negative")));
    }
    let half = z_value(alpha)? * var_cal.sqrt();
    Ok((mu - half, mu + half))
}
