//! Inverse probability weights and effect estimates built from one or two
//! propensity fits.

use serde::{Deserialize, Serialize};

use crate::error::{NawtError, Result};
use crate::model::{Dataset, EstimandSpec};
use crate::solver::PropensityFit;

/// Weighted-mean flavor: Hajek normalizes weights within the weighted
/// group; Horvitz-Thompson divides by the raw group size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Hajek,
    HorvitzThompson,
}

/// A point estimate with the unit-level weights that produced it.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub tau: f64,
    pub weights: Vec<f64>,
    pub estimand: EstimandSpec,
    pub estimator: Estimator,
    /// Hajek control-group mean (ATT/ATC) or per-arm means (ATE): kept for
    /// the sandwich blocks.
    pub mu0: f64,
    pub mu1: f64,
}

fn require_outcomes<'a>(ds: &'a Dataset) -> Result<&'a [f64]> {
    ds.y.as_deref()
        .ok_or_else(|| NawtError::Domain("estimand requires outcomes".into()))
}

fn check_fit(ds: &Dataset, fit: &PropensityFit) -> Result<()> {
    if fit.pi_hat.len() != ds.n() {
        return Err(NawtError::Domain(
            "fit does not match dataset size".into(),
        ));
    }
    if !fit.converged {
        return Err(NawtError::NonConvergence {
            score_norm: fit.score_norm,
            iterations: fit.iterations,
        });
    }
    Ok(())
}

/// Weighted difference in means for the ATT: treated units carry weight 1,
/// controls carry pi/(1-pi).
pub fn estimate_att(ds: &Dataset, fit: &PropensityFit) -> Result<EffectEstimate> {
    estimate_att_with(ds, fit, Estimator::Hajek)
}

pub fn estimate_att_with(
    ds: &Dataset,
    fit: &PropensityFit,
    estimator: Estimator,
) -> Result<EffectEstimate> {
    check_fit(ds, fit)?;
    let y = require_outcomes(ds)?;
    let n = ds.n();
    let mut weights = vec![0.0; n];
    let mut treated_sum = 0.0;
    let mut n1 = 0.0;
    let mut control_num = 0.0;
    let mut control_den = 0.0;
    let mut n0 = 0.0;
    for i in 0..n {
        if ds.t[i] == 1 {
            weights[i] = 1.0;
            treated_sum += y[i];
            n1 += 1.0;
        } else {
            let w = fit.pi_hat[i] / (1.0 - fit.pi_hat[i]);
            weights[i] = w;
            control_num += w * y[i];
            control_den += w;
            n0 += 1.0;
        }
    }
    if control_den <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATT control weights".into()));
    }
    let mu1 = treated_sum / n1;
    let mu0 = match estimator {
        Estimator::Hajek => control_num / control_den,
        Estimator::HorvitzThompson => control_num / n0,
    };
    Ok(EffectEstimate {
        tau: mu1 - mu0,
        weights,
        estimand: EstimandSpec::Att,
        estimator,
        mu0,
        mu1,
    })
}

/// ATC via label swap: estimate the ATT on the relabeled data and negate.
/// `fit` must come from `ds.relabeled()`; the returned weights are indexed
/// by the original units.
pub fn estimate_atc(ds: &Dataset, fit_on_relabeled: &PropensityFit) -> Result<EffectEstimate> {
    let flipped = ds.relabeled();
    let att = estimate_att(&flipped, fit_on_relabeled)?;
    Ok(EffectEstimate {
        tau: -att.tau,
        weights: att.weights,
        estimand: EstimandSpec::Atc,
        estimator: att.estimator,
        mu0: att.mu1,
        mu1: att.mu0,
    })
}

/// ATE from two arm-specific fits: mu1 is the weighted treated mean with
/// weights 1/pi (from `fit1`), mu0 the weighted control mean with weights
/// 1/(1-pi) (from `fit0`). Pass the same fit twice for combined estimation.
pub fn estimate_ate(
    ds: &Dataset,
    fit0: &PropensityFit,
    fit1: &PropensityFit,
) -> Result<EffectEstimate> {
    estimate_ate_with(ds, fit0, fit1, Estimator::Hajek)
}

pub fn estimate_ate_with(
    ds: &Dataset,
    fit0: &PropensityFit,
    fit1: &PropensityFit,
    estimator: Estimator,
) -> Result<EffectEstimate> {
    check_fit(ds, fit0)?;
    check_fit(ds, fit1)?;
    let y = require_outcomes(ds)?;
    let n = ds.n();
    let combined = std::ptr::eq(fit0, fit1) || fit0.beta == fit1.beta;
    let mut weights = vec![0.0; n];
    let (mut num1, mut den1, mut cnt1) = (0.0, 0.0, 0.0);
    let (mut num0, mut den0, mut cnt0) = (0.0, 0.0, 0.0);
    for i in 0..n {
        if ds.t[i] == 1 {
            let w = 1.0 / fit1.pi_hat[i];
            weights[i] = w;
            num1 += w * y[i];
            den1 += w;
            cnt1 += 1.0;
        } else {
            let w = 1.0 / (1.0 - fit0.pi_hat[i]);
            weights[i] = w;
            num0 += w * y[i];
            den0 += w;
            cnt0 += 1.0;
        }
    }
    if den1 <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATE treated weights".into()));
    }
    if den0 <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATE control weights".into()));
    }
    let (mu1, mu0) = match estimator {
        Estimator::Hajek => (num1 / den1, num0 / den0),
        Estimator::HorvitzThompson => (num1 / cnt1, num0 / cnt0),
    };
    Ok(EffectEstimate {
        tau: mu1 - mu0,
        weights,
        estimand: if combined {
            EstimandSpec::AteCombined
        } else {
            EstimandSpec::AteSeparate
        },
        estimator,
        mu0,
        mu1,
    })
}

/// Average outcome under missingness: Hajek mean of observed outcomes with
/// weights 1/(1-pi) on the non-missing (t = 0) units.
pub fn estimate_ao(ds: &Dataset, fit: &PropensityFit) -> Result<EffectEstimate> {
    check_fit(ds, fit)?;
    let y = require_outcomes(ds)?;
    let n = ds.n();
    let mut weights = vec![0.0; n];
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if ds.t[i] == 0 {
            if y[i].is_nan() {
                return Err(NawtError::NonFinite {
                    row: i,
                    col: "outcome".into(),
                });
            }
            let w = 1.0 / (1.0 - fit.pi_hat[i]);
            weights[i] = w;
            num += w * y[i];
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(NawtError::ZeroDenominator("AO weights".into()));
    }
    let mu = num / den;
    Ok(EffectEstimate {
        tau: mu,
        weights,
        estimand: EstimandSpec::Ao,
        estimator: Estimator::Hajek,
        mu0: mu,
        mu1: f64::NAN,
    })
}

/// One bin of the relative-impact diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct ImpactBin {
    pub lo: f64,
    pub hi: f64,
    pub n_controls: usize,
    /// -mean over control units in the bin of (y - mu0)/(1-pi)^2; None when
    /// the bin holds no control units.
    pub impact: Option<f64>,
}

/// Diagnostic profile of how strongly control units at each fitted
/// propensity level move the ATT estimate.
pub fn relative_impact_profile(
    ds: &Dataset,
    fit: &PropensityFit,
    n_bins: usize,
) -> Result<Vec<ImpactBin>> {
    if n_bins == 0 {
        return Err(NawtError::InvalidConfig("n_bins must be positive".into()));
    }
    let y = require_outcomes(ds)?;
    let mu0 = estimate_att(ds, fit)?.mu0;
    let width = 1.0 / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..ds.n() {
        if ds.t[i] == 0 {
            let pi = fit.pi_hat[i];
            let b = ((pi / width) as usize).min(n_bins - 1);
            sums[b] += (y[i] - mu0) / ((1.0 - pi) * (1.0 - pi));
            counts[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| ImpactBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            n_controls: counts[b],
            impact: (counts[b] > 0).then(|| -sums[b] / counts[b] as f64),
        })
        .collect())
}
