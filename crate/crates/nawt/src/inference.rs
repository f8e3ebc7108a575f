//! Sandwich variances from stacked estimating equations, bootstrap
//! standard errors, and adaptive weighting-function selection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NawtError, Result};
use crate::estimands::{estimate_ao, estimate_ate, estimate_att, EffectEstimate};
use crate::model::{Dataset, EstimandSpec, WeightingScheme};
use crate::numerics::RngStream;
use crate::solver::{fit_nawt, score_jacobian, FitOptions, PropensityFit};

pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMethod {
    Sandwich,
    Bootstrap,
}

/// Variance estimate for a point estimate, with the joint parameter
/// covariance when the sandwich route produced it.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub se_tau: f64,
    /// Joint covariance over the stacked parameters; the target estimate is
    /// the bottom-right entry. A 1x1 matrix for bootstrap reports.
    pub vcov: DMatrix<f64>,
    pub method: VarianceMethod,
    pub n_boot: Option<usize>,
    pub n_failed: usize,
    pub ci95: (f64, f64),
}

impl VarianceReport {
    fn from_vcov(vcov: DMatrix<f64>, tau: f64) -> Self {
        let last = vcov.nrows() - 1;
        let se = vcov[(last, last)].max(0.0).sqrt();
        VarianceReport {
            se_tau: se,
            vcov,
            method: VarianceMethod::Sandwich,
            n_boot: None,
            n_failed: 0,
            ci95: (tau - Z_95 * se, tau + Z_95 * se),
        }
    }
}

fn invert_h(h: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = h.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    h.try_inverse()
        .ok_or(NawtError::SingularHessian(max / min.max(1e-300)))
}

fn sandwich_from_stacks(
    h: DMatrix<f64>,
    psi: &[DVector<f64>],
    n: usize,
    tau: f64,
) -> Result<VarianceReport> {
    let dim = h.nrows();
    let mut sigma = DMatrix::zeros(dim, dim);
    for p in psi {
        sigma += p * p.transpose();
    }
    sigma /= n as f64;
    let h_inv = invert_h(h)?;
    let vcov = (&h_inv * sigma * h_inv.transpose()) / n as f64;
    Ok(VarianceReport::from_vcov(vcov, tau))
}

/// Sandwich variance for the ATT from the joint estimating equations over
/// the stacked parameters (beta, mu1, mu0, tau). Both arm means use
/// self-centered (Hajek) estimating functions so the normalization is
/// accounted for.
pub fn sandwich_att(
    ds: &Dataset,
    fit: &PropensityFit,
    effect: &EffectEstimate,
) -> Result<VarianceReport> {
    let y = ds
        .y
        .as_deref()
        .ok_or_else(|| NawtError::Domain("sandwich requires outcomes".into()))?;
    let n = ds.n();
    let k = ds.k();
    let n1 = ds.n_treated() as f64;
    let tau = effect.tau;
    let mu0 = effect.mu0;
    let mu1 = effect.mu1;

    // normalizer of the weighted control mean
    let w_sum: f64 = (0..n)
        .filter(|&i| ds.t[i] == 0)
        .map(|i| fit.pi_hat[i] / (1.0 - fit.pi_hat[i]))
        .sum();
    if w_sum <= 0.0 || n1 <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATT control weights".into()));
    }

    let dim = k + 3;
    let (i_m1, i_m0, i_tau) = (k, k + 1, k + 2);
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (k, k))
        .copy_from(&score_jacobian(&fit.beta, ds, fit.scheme)?);
    h[(i_m1, i_m1)] = -1.0;
    h[(i_m0, i_m0)] = -1.0;
    h[(i_tau, i_m1)] = 1.0;
    h[(i_tau, i_m0)] = -1.0;
    h[(i_tau, i_tau)] = -1.0;

    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let row = ds.row(i);
        let pi = fit.pi_hat[i];
        let t = ds.t[i] as f64;
        let om = crate::model::omega(fit.scheme, pi)?;
        let mut g = DVector::zeros(dim);
        for j in 0..k {
            g[j] = (t - pi) * om * row[j];
        }
        if ds.t[i] == 1 {
            g[i_m1] = (n as f64 / n1) * (y[i] - mu1);
        } else {
            let odds = pi / (1.0 - pi);
            g[i_m0] = (n as f64 / w_sum) * odds * (y[i] - mu0);
            // d/d beta of the weighted control mean at the solution
            for j in 0..k {
                h[(i_m0, j)] += odds * (y[i] - mu0) * row[j] / w_sum;
            }
        }
        psi.push(g);
    }
    sandwich_from_stacks(h, &psi, n, tau)
}

/// Sandwich variance for the separately-fit ATE over the stacked
/// parameters (beta0, mu0, beta1, mu1, tau).
pub fn sandwich_ate_separate(
    ds: &Dataset,
    fit0: &PropensityFit,
    fit1: &PropensityFit,
    effect: &EffectEstimate,
) -> Result<VarianceReport> {
    let y = ds
        .y
        .as_deref()
        .ok_or_else(|| NawtError::Domain("sandwich requires outcomes".into()))?;
    let n = ds.n();
    let k = ds.k();
    let (mu0, mu1, tau) = (effect.mu0, effect.mu1, effect.tau);

    let w0: f64 = (0..n)
        .filter(|&i| ds.t[i] == 0)
        .map(|i| 1.0 / (1.0 - fit0.pi_hat[i]))
        .sum();
    let w1: f64 = (0..n)
        .filter(|&i| ds.t[i] == 1)
        .map(|i| 1.0 / fit1.pi_hat[i])
        .sum();
    if w0 <= 0.0 || w1 <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATE weights".into()));
    }

    let dim = 2 * k + 3;
    let (i_b0, i_m0, i_b1, i_m1, i_tau) = (0, k, k + 1, 2 * k + 1, 2 * k + 2);

    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((i_b0, i_b0), (k, k))
        .copy_from(&score_jacobian(&fit0.beta, ds, fit0.scheme)?);
    h.view_mut((i_b1, i_b1), (k, k))
        .copy_from(&score_jacobian(&fit1.beta, ds, fit1.scheme)?);
    h[(i_m0, i_m0)] = -1.0;
    h[(i_m1, i_m1)] = -1.0;
    h[(i_tau, i_m0)] = -1.0;
    h[(i_tau, i_m1)] = 1.0;
    h[(i_tau, i_tau)] = -1.0;

    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let row = ds.row(i);
        let t = ds.t[i] as f64;
        let pi0 = fit0.pi_hat[i];
        let pi1 = fit1.pi_hat[i];
        let om0 = crate::model::omega(fit0.scheme, pi0)?;
        let om1 = crate::model::omega(fit1.scheme, pi1)?;
        let mut g = DVector::zeros(dim);
        for j in 0..k {
            g[i_b0 + j] = (t - pi0) * om0 * row[j];
            g[i_b1 + j] = (t - pi1) * om1 * row[j];
        }
        if ds.t[i] == 0 {
            g[i_m0] = (n as f64 / w0) * (y[i] - mu0) / (1.0 - pi0);
            // d/d beta0 of the weighted control mean
            for j in 0..k {
                h[(i_m0, i_b0 + j)] += pi0 / (1.0 - pi0) * (y[i] - mu0) * row[j] / w0;
            }
        } else {
            g[i_m1] = (n as f64 / w1) * (y[i] - mu1) / pi1;
            for j in 0..k {
                h[(i_m1, i_b1 + j)] -= (1.0 - pi1) / pi1 * (y[i] - mu1) * row[j] / w1;
            }
        }
        psi.push(g);
    }
    sandwich_from_stacks(h, &psi, n, tau)
}

/// Sandwich variance for the combined-fit ATE (one propensity fit feeds
/// both arms): stacked parameters (beta, mu0, mu1, tau).
pub fn sandwich_ate_combined(
    ds: &Dataset,
    fit: &PropensityFit,
    effect: &EffectEstimate,
) -> Result<VarianceReport> {
    let y = ds
        .y
        .as_deref()
        .ok_or_else(|| NawtError::Domain("sandwich requires outcomes".into()))?;
    let n = ds.n();
    let k = ds.k();
    let (mu0, mu1, tau) = (effect.mu0, effect.mu1, effect.tau);
    let w0: f64 = (0..n)
        .filter(|&i| ds.t[i] == 0)
        .map(|i| 1.0 / (1.0 - fit.pi_hat[i]))
        .sum();
    let w1: f64 = (0..n)
        .filter(|&i| ds.t[i] == 1)
        .map(|i| 1.0 / fit.pi_hat[i])
        .sum();
    if w0 <= 0.0 || w1 <= 0.0 {
        return Err(NawtError::ZeroDenominator("ATE weights".into()));
    }

    let dim = k + 3;
    let (i_m0, i_m1, i_tau) = (k, k + 1, k + 2);
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (k, k))
        .copy_from(&score_jacobian(&fit.beta, ds, fit.scheme)?);
    h[(i_m0, i_m0)] = -1.0;
    h[(i_m1, i_m1)] = -1.0;
    h[(i_tau, i_m0)] = -1.0;
    h[(i_tau, i_m1)] = 1.0;
    h[(i_tau, i_tau)] = -1.0;

    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let row = ds.row(i);
        let t = ds.t[i] as f64;
        let pi = fit.pi_hat[i];
        let om = crate::model::omega(fit.scheme, pi)?;
        let mut g = DVector::zeros(dim);
        for j in 0..k {
            g[j] = (t - pi) * om * row[j];
        }
        if ds.t[i] == 0 {
            g[i_m0] = (n as f64 / w0) * (y[i] - mu0) / (1.0 - pi);
            for j in 0..k {
                h[(i_m0, j)] += pi / (1.0 - pi) * (y[i] - mu0) * row[j] / w0;
            }
        } else {
            g[i_m1] = (n as f64 / w1) * (y[i] - mu1) / pi;
            for j in 0..k {
                h[(i_m1, j)] -= (1.0 - pi) / pi * (y[i] - mu1) * row[j] / w1;
            }
        }
        psi.push(g);
    }
    sandwich_from_stacks(h, &psi, n, tau)
}

/// Sandwich variance for the average outcome under missingness: stacked
/// parameters (beta, mu).
pub fn sandwich_ao(
    ds: &Dataset,
    fit: &PropensityFit,
    effect: &EffectEstimate,
) -> Result<VarianceReport> {
    let y = ds
        .y
        .as_deref()
        .ok_or_else(|| NawtError::Domain("sandwich requires outcomes".into()))?;
    let n = ds.n();
    let k = ds.k();
    let mu = effect.tau;
    let w_sum: f64 = (0..n)
        .filter(|&i| ds.t[i] == 0)
        .map(|i| 1.0 / (1.0 - fit.pi_hat[i]))
        .sum();
    if w_sum <= 0.0 {
        return Err(NawtError::ZeroDenominator("AO weights".into()));
    }
    let dim = k + 1;
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (k, k))
        .copy_from(&score_jacobian(&fit.beta, ds, fit.scheme)?);
    h[(k, k)] = -1.0;
    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let row = ds.row(i);
        let t = ds.t[i] as f64;
        let pi = fit.pi_hat[i];
        let om = crate::model::omega(fit.scheme, pi)?;
        let mut g = DVector::zeros(dim);
        for j in 0..k {
            g[j] = (t - pi) * om * row[j];
        }
        if ds.t[i] == 0 {
            g[k] = (n as f64 / w_sum) * (y[i] - mu) / (1.0 - pi);
            for j in 0..k {
                h[(k, j)] += pi / (1.0 - pi) * (y[i] - mu) * row[j] / w_sum;
            }
        }
        psi.push(g);
    }
    sandwich_from_stacks(h, &psi, n, mu)
}

/// Nonparametric bootstrap of an arbitrary estimation pipeline. Replicate
/// `b` resamples with the stream (seed, b); failed replicates are dropped
/// and counted, erroring when more than 5% fail.
pub fn bootstrap_se<F>(
    ds: &Dataset,
    pipeline: F,
    n_boot: usize,
    seed: u64,
    tau_point: f64,
) -> Result<VarianceReport>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if n_boot < 100 {
        return Err(NawtError::InvalidConfig(
            "bootstrap requires n_boot >= 100".into(),
        ));
    }
    let n = ds.n();
    let draws: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::new(seed, b as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let x = DMatrix::from_fn(n, ds.k(), |i, j| ds.x[(idx[i], j)]);
            let t: Vec<u8> = idx.iter().map(|&i| ds.t[i]).collect();
            let y = ds
                .y
                .as_ref()
                .map(|y| idx.iter().map(|&i| y[i]).collect::<Vec<f64>>());
            let resampled = Dataset::new(x, t, y, ds.names.clone()).ok()?;
            pipeline(&resampled).ok().filter(|v| v.is_finite())
        })
        .collect();
    let values: Vec<f64> = draws.iter().filter_map(|v| *v).collect();
    let n_failed = n_boot - values.len();
    if n_failed as f64 > 0.05 * n_boot as f64 {
        return Err(NawtError::TooManyFailures {
            failed: n_failed,
            total: n_boot,
        });
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        / (values.len() as f64 - 1.0).max(1.0);
    let se = var.sqrt();
    Ok(VarianceReport {
        se_tau: se,
        vcov: DMatrix::from_element(1, 1, var),
        method: VarianceMethod::Bootstrap,
        n_boot: Some(n_boot),
        n_failed,
        ci95: (tau_point - Z_95 * se, tau_point + Z_95 * se),
    })
}

/// Percentile 95% interval from the same bootstrap replicates.
pub fn bootstrap_percentile_ci<F>(
    ds: &Dataset,
    pipeline: F,
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    let n = ds.n();
    let mut values: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = RngStream::new(seed, b as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let x = DMatrix::from_fn(n, ds.k(), |i, j| ds.x[(idx[i], j)]);
            let t: Vec<u8> = idx.iter().map(|&i| ds.t[i]).collect();
            let y = ds
                .y
                .as_ref()
                .map(|y| idx.iter().map(|&i| y[i]).collect::<Vec<f64>>());
            let resampled = Dataset::new(x, t, y, ds.names.clone()).ok()?;
            pipeline(&resampled).ok().filter(|v| v.is_finite())
        })
        .collect();
    if values.len() < 40 {
        return Err(NawtError::TooManyFailures {
            failed: n_boot - values.len(),
            total: n_boot,
        });
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| values[((p * (values.len() - 1) as f64).round() as usize).min(values.len() - 1)];
    Ok((q(0.025), q(0.975)))
}

/// Fits one alpha of the power family for the given estimand and returns
/// the point estimate plus its sandwich report.
pub fn fit_alpha(
    ds: &Dataset,
    estimand: EstimandSpec,
    alpha: f64,
) -> Result<(EffectEstimate, VarianceReport)> {
    let opts = FitOptions::default();
    match estimand {
        EstimandSpec::Att => {
            let fit = fit_nawt(ds, WeightingScheme::PowerPi(alpha), &opts)?;
            let eff = estimate_att(ds, &fit)?;
            let var = sandwich_att(ds, &fit, &eff)?;
            Ok((eff, var))
        }
        EstimandSpec::Atc => {
            let flipped = ds.relabeled();
            let fit = fit_nawt(&flipped, WeightingScheme::PowerPi(alpha), &opts)?;
            let eff_att = estimate_att(&flipped, &fit)?;
            let var = sandwich_att(&flipped, &fit, &eff_att)?;
            let eff = crate::estimands::estimate_atc(ds, &fit)?;
            // negation leaves the variance unchanged
            let mut var = var;
            var.ci95 = (eff.tau - Z_95 * var.se_tau, eff.tau + Z_95 * var.se_tau);
            Ok((eff, var))
        }
        EstimandSpec::AteSeparate => {
            let fit0 = fit_nawt(ds, WeightingScheme::PowerPi(alpha), &opts)?;
            let fit1 = fit_nawt(ds, WeightingScheme::PowerOneMinusPi(alpha), &opts)?;
            let eff = estimate_ate(ds, &fit0, &fit1)?;
            let var = sandwich_ate_separate(ds, &fit0, &fit1, &eff)?;
            Ok((eff, var))
        }
        EstimandSpec::AteCombined => {
            let fit = fit_nawt(ds, WeightingScheme::CombinedPower(alpha), &opts)?;
            let eff = estimate_ate(ds, &fit, &fit)?;
            let var = sandwich_ate_combined(ds, &fit, &eff)?;
            Ok((eff, var))
        }
        EstimandSpec::Ao => {
            let fit = fit_nawt(ds, WeightingScheme::PowerPi(alpha), &opts)?;
            let eff = estimate_ao(ds, &fit)?;
            let var = sandwich_ao(ds, &fit, &eff)?;
            Ok((eff, var))
        }
    }
}

/// One row of the adaptive-selection table.
#[derive(Debug, Clone)]
pub struct AlphaRow {
    pub alpha: f64,
    pub tau: f64,
    pub report: Option<VarianceReport>,
    pub error: Option<String>,
}

/// Fits every alpha on the grid and picks the one with the smallest
/// sandwich variance for the target estimate; ties break toward the
/// earlier (smaller) grid entry. Alphas that fail to fit are excluded.
pub fn adaptive_select(
    ds: &Dataset,
    estimand: EstimandSpec,
    alpha_grid: &[f64],
) -> Result<(WeightingScheme, Vec<AlphaRow>)> {
    if alpha_grid.is_empty() {
        return Err(NawtError::InvalidConfig("alpha grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(alpha_grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, &alpha) in alpha_grid.iter().enumerate() {
        match fit_alpha(ds, estimand, alpha) {
            Ok((eff, var)) => {
                if best.as_ref().map_or(true, |b| var.se_tau < b.1) {
                    best = Some((i, var.se_tau));
                }
                rows.push(AlphaRow {
                    alpha,
                    tau: eff.tau,
                    report: Some(var),
                    error: None,
                });
            }
            Err(e) => rows.push(AlphaRow {
                alpha,
                tau: f64::NAN,
                report: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (idx, _) = best.ok_or(NawtError::NonConvergence {
        score_norm: f64::NAN,
        iterations: 0,
    })?;
    let alpha = alpha_grid[idx];
    let scheme = match estimand {
        EstimandSpec::AteCombined => WeightingScheme::CombinedPower(alpha),
        _ => WeightingScheme::PowerPi(alpha),
    };
    Ok((scheme, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(n: usize, stream: u64) -> Dataset {
        let mut rng = RngStream::new(7, stream).rng();
        let mut x = DMatrix::zeros(n, 2);
        let mut t = vec![0u8; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = StandardNormal.sample(&mut rng);
            let pi = crate::model::sigmoid(0.5 * x[(i, 1)]);
            t[i] = u8::from(rng.random::<f64>() < pi);
            let noise: f64 = StandardNormal.sample(&mut rng);
            y[i] = 2.0 + 1.5 * t[i] as f64 + x[(i, 1)] + noise;
        }
        Dataset::new(x, t, Some(y), vec!["c".into(), "x".into()]).unwrap()
    }

    /// Two-sample difference-in-means SE for a randomized design.
    fn classical_se(ds: &Dataset) -> f64 {
        let y = ds.y.as_ref().unwrap();
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..ds.n() {
            if ds.t[i] == 1 {
                s1 += y[i];
                n1 += 1.0;
            } else {
                s0 += y[i];
                n0 += 1.0;
            }
        }
        let (m1, m0) = (s1 / n1, s0 / n0);
        let (mut v1, mut v0) = (0.0, 0.0);
        for i in 0..ds.n() {
            if ds.t[i] == 1 {
                v1 += (y[i] - m1).powi(2);
            } else {
                v0 += (y[i] - m0).powi(2);
            }
        }
        (v1 / (n1 * (n1 - 1.0)) + v0 / (n0 * (n0 - 1.0))).sqrt()
    }

    fn randomized(n: usize, stream: u64) -> Dataset {
        let mut rng = RngStream::new(11, stream).rng();
        let mut x = DMatrix::zeros(n, 2);
        let mut t = vec![0u8; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = StandardNormal.sample(&mut rng);
            t[i] = u8::from(rng.random::<f64>() < 0.5);
            let noise: f64 = StandardNormal.sample(&mut rng);
            y[i] = 1.0 + 2.0 * t[i] as f64 + noise;
        }
        Dataset::new(x, t, Some(y), vec!["c".into(), "x".into()]).unwrap()
    }

    #[test]
    fn sandwich_att_matches_classical_se_under_randomization() {
        let ds = randomized(10_000, 1);
        let fit = fit_nawt(&ds, WeightingScheme::MleUnit, &FitOptions::default()).unwrap();
        let eff = estimate_att(&ds, &fit).unwrap();
        let rep = sandwich_att(&ds, &fit, &eff).unwrap();
        let classical = classical_se(&ds);
        assert!(
            (rep.se_tau - classical).abs() / classical < 0.10,
            "sandwich {} vs classical {}",
            rep.se_tau,
            classical
        );
    }

    #[test]
    fn sandwich_vcov_symmetric_psd() {
        let ds = synthetic(800, 2);
        let fit = fit_nawt(&ds, WeightingScheme::PowerPi(2.0), &FitOptions::default()).unwrap();
        let eff = estimate_att(&ds, &fit).unwrap();
        let rep = sandwich_att(&ds, &fit, &eff).unwrap();
        let v = &rep.vcov;
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                assert!((v[(i, j)] - v[(j, i)]).abs() <= 1e-10 * v.trace().abs().max(1.0));
            }
        }
        let sym = (v + v.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let floor = -1e-8 * v.trace();
        assert!(eig.eigenvalues.iter().all(|&e| e >= floor));
    }

    #[test]
    fn sandwich_beta_block_matches_marginal_form() {
        // with block-triangular H the (beta, beta) corner of the joint
        // sandwich equals H_bb^-1 Sigma_bb H_bb^-T
        let ds = synthetic(500, 3);
        let fit = fit_nawt(&ds, WeightingScheme::PowerPi(2.0), &FitOptions::default()).unwrap();
        let eff = estimate_att(&ds, &fit).unwrap();
        let rep = sandwich_att(&ds, &fit, &eff).unwrap();
        let k = ds.k();
        let h_bb = score_jacobian(&fit.beta, &ds, fit.scheme).unwrap();
        let mut sig = DMatrix::zeros(k, k);
        for i in 0..ds.n() {
            let row = ds.row(i);
            let pi = fit.pi_hat[i];
            let om = crate::model::omega(fit.scheme, pi).unwrap();
            let s = DVector::from_fn(k, |j, _| (ds.t[i] as f64 - pi) * om * row[j]);
            sig += &s * s.transpose();
        }
        sig /= ds.n() as f64;
        let hi = h_bb.try_inverse().unwrap();
        let expect = (&hi * sig * hi.transpose()) / ds.n() as f64;
        for a in 0..k {
            for b in 0..k {
                assert!((rep.vcov[(a, b)] - expect[(a, b)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn sandwich_ate_independent_arms() {
        let ds = randomized(10_000, 4);
        let fit0 = fit_nawt(&ds, WeightingScheme::MleUnit, &FitOptions::default()).unwrap();
        let eff = estimate_ate(&ds, &fit0, &fit0).unwrap();
        let rep = sandwich_ate_combined(&ds, &fit0, &eff).unwrap();
        let classical = classical_se(&ds);
        assert!((rep.se_tau - classical).abs() / classical < 0.10);
    }

    #[test]
    fn sandwich_ate_constant_treated_arm() {
        let mut ds = randomized(4000, 5);
        let y = ds.y.as_mut().unwrap();
        for i in 0..ds.t.len() {
            if ds.t[i] == 1 {
                y[i] = 5.0;
            }
        }
        let fit0 = fit_nawt(&ds, WeightingScheme::PowerPi(1.0), &FitOptions::default()).unwrap();
        let fit1 =
            fit_nawt(&ds, WeightingScheme::PowerOneMinusPi(1.0), &FitOptions::default()).unwrap();
        let eff = estimate_ate(&ds, &fit0, &fit1).unwrap();
        let rep = sandwich_ate_separate(&ds, &fit0, &fit1, &eff).unwrap();
        let i_m1 = 2 * ds.k() + 1;
        assert!(rep.vcov[(i_m1, i_m1)].abs() < 1e-6);
    }

    #[test]
    fn bootstrap_deterministic_and_constant_pipeline() {
        let ds = synthetic(200, 6);
        let rep = bootstrap_se(&ds, |_| Ok(3.0), 100, 42, 3.0).unwrap();
        assert_eq!(rep.se_tau, 0.0);
        let a = bootstrap_se(
            &ds,
            |d| {
                let fit = fit_nawt(d, WeightingScheme::MleUnit, &FitOptions::default())?;
                Ok(estimate_att(d, &fit)?.tau)
            },
            100,
            42,
            0.0,
        )
        .unwrap();
        let b = bootstrap_se(
            &ds,
            |d| {
                let fit = fit_nawt(d, WeightingScheme::MleUnit, &FitOptions::default())?;
                Ok(estimate_att(d, &fit)?.tau)
            },
            100,
            42,
            0.0,
        )
        .unwrap();
        assert_eq!(a.se_tau.to_bits(), b.se_tau.to_bits());
    }

    #[test]
    fn bootstrap_requires_enough_replicates() {
        let ds = synthetic(100, 7);
        assert!(bootstrap_se(&ds, |_| Ok(0.0), 50, 1, 0.0).is_err());
    }

    #[test]
    fn adaptive_singleton_grid() {
        let ds = synthetic(400, 8);
        let (scheme, rows) = adaptive_select(&ds, EstimandSpec::Att, &[0.0]).unwrap();
        assert_eq!(scheme, WeightingScheme::PowerPi(0.0));
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn adaptive_tie_breaks_to_first_entry() {
        let ds = synthetic(400, 9);
        let (scheme, rows) = adaptive_select(&ds, EstimandSpec::Att, &[2.0, 2.0]).unwrap();
        assert_eq!(scheme, WeightingScheme::PowerPi(2.0));
        assert_eq!(rows.len(), 2);
        let a = rows[0].report.as_ref().unwrap().se_tau;
        let b = rows[1].report.as_ref().unwrap().se_tau;
        assert_eq!(a, b);
    }
}
