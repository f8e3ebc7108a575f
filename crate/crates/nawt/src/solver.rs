//! Root-finding for the weighted score equations and the over-identified
//! GMM with covariate-balance moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NawtError, Result};
use crate::model::{logistic_pi, omega, omega_prime, Dataset, WeightingScheme, PROB_CLAMP};
use crate::numerics::{control_loglik_term, treated_loglik_term};

/// Result of a weighted-score propensity fit.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub beta: DVector<f64>,
    pub pi_hat: Vec<f64>,
    /// Infinity norm of the mean score at beta.
    pub score_norm: f64,
    pub iterations: usize,
    /// Pseudo-log-likelihood at beta; NaN for schemes without a tabulated
    /// likelihood (CBPS variants and the reversed/combined powers).
    pub pseudo_loglik: f64,
    pub scheme: WeightingScheme,
    pub converged: bool,
    /// Units whose fitted probability hit the clamp bounds.
    pub n_clamped: usize,
    /// Set when more than 1% of fitted probabilities were clamped.
    pub separation_warning: bool,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub init: Option<DVector<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-9,
            max_iter: 100,
            init: None,
        }
    }
}

/// Weight-matrix choice for the over-identified GMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMatrixKind {
    Identity,
    ContinuouslyUpdating,
}

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub weight_matrix_kind: WeightMatrixKind,
    pub tol: f64,
    pub max_iter: usize,
    /// When false, only the balance moments enter (the just-identified
    /// CBPS route); when true the weighted score is stacked on top.
    pub include_score: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            weight_matrix_kind: WeightMatrixKind::ContinuouslyUpdating,
            tol: 1e-9,
            max_iter: 100,
            include_score: true,
        }
    }
}

/// Result of a GMM propensity fit.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub beta: DVector<f64>,
    /// gbar' A gbar at beta.
    pub objective: f64,
    /// Per-condition moment means at beta (score block first, then balance).
    pub moment_values: Vec<f64>,
    pub weight_matrix_kind: WeightMatrixKind,
    pub balance_cols: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

fn fitted_probs(beta: &DVector<f64>, ds: &Dataset) -> Vec<f64> {
    (0..ds.n())
        .map(|i| logistic_pi(beta, &ds.row(i)))
        .collect()
}

/// Mean weighted score (1/n) sum (t_i - pi_i) omega(pi_i) x_i.
pub fn weighted_score(
    beta: &DVector<f64>,
    ds: &Dataset,
    scheme: WeightingScheme,
) -> Result<DVector<f64>> {
    scheme.validate()?;
    let n = ds.n();
    let k = ds.k();
    let mut s = DVector::zeros(k);
    for i in 0..n {
        let pi = logistic_pi(beta, &ds.row(i));
        let w = (ds.t[i] as f64 - pi) * omega(scheme, pi)?;
        for j in 0..k {
            s[j] += w * ds.x[(i, j)];
        }
        if !w.is_finite() {
            return Err(NawtError::Domain(format!(
                "non-finite score contribution at unit {i}"
            )));
        }
    }
    Ok(s / n as f64)
}

/// Analytic Jacobian of the mean weighted score:
/// (1/n) sum pi(1-pi) [-omega + (t - pi) omega'] x x'.
pub fn score_jacobian(
    beta: &DVector<f64>,
    ds: &Dataset,
    scheme: WeightingScheme,
) -> Result<DMatrix<f64>> {
    let n = ds.n();
    let k = ds.k();
    let mut j_mat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = ds.row(i);
        let pi = logistic_pi(beta, &row);
        let d = pi * (1.0 - pi)
            * (-omega(scheme, pi)? + (ds.t[i] as f64 - pi) * omega_prime(scheme, pi)?);
        for a in 0..k {
            for b in 0..k {
                j_mat[(a, b)] += d * row[a] * row[b];
            }
        }
    }
    Ok(j_mat / n as f64)
}

/// Pseudo-log-likelihood under the power-pi weighting (the MLE binomial
/// log-likelihood at alpha = 0). Defined only for MleUnit and PowerPi.
pub fn pseudo_loglik(beta: &DVector<f64>, ds: &Dataset, scheme: WeightingScheme) -> Result<f64> {
    // The reversed power scheme is the plain power scheme after relabeling
    // (t, pi) -> (1 - t, 1 - pi), and the combined scheme is the sum of the
    // two, so all four likelihood-backed schemes reduce to the same two
    // antiderivatives.
    let term = |t: u8, pi: f64| -> Result<f64> {
        Ok(match scheme {
            WeightingScheme::MleUnit => {
                if t == 1 {
                    treated_loglik_term(pi, 0.0)?
                } else {
                    control_loglik_term(pi, 0.0)?
                }
            }
            WeightingScheme::PowerPi(a) => {
                if t == 1 {
                    treated_loglik_term(pi, a)?
                } else {
                    control_loglik_term(pi, a)?
                }
            }
            WeightingScheme::PowerOneMinusPi(a) => {
                if t == 1 {
                    control_loglik_term(1.0 - pi, a)?
                } else {
                    treated_loglik_term(1.0 - pi, a)?
                }
            }
            WeightingScheme::CombinedPower(a) => {
                if t == 1 {
                    treated_loglik_term(pi, a)? + control_loglik_term(1.0 - pi, a)?
                } else {
                    control_loglik_term(pi, a)? + treated_loglik_term(1.0 - pi, a)?
                }
            }
            other => {
                return Err(NawtError::Domain(format!(
                    "pseudo_loglik is defined for mle/power/power-rev/combined schemes, got {}",
                    other.label()
                )))
            }
        })
    };
    let mut ll = 0.0;
    for i in 0..ds.n() {
        let pi = logistic_pi(beta, &ds.row(i));
        ll += term(ds.t[i], pi)?;
    }
    Ok(ll)
}

/// Whether the scheme's weighted score is the gradient of a tabulated
/// pseudo-log-likelihood.
fn has_pseudo_loglik(scheme: WeightingScheme) -> bool {
    matches!(
        scheme,
        WeightingScheme::MleUnit
            | WeightingScheme::PowerPi(_)
            | WeightingScheme::PowerOneMinusPi(_)
            | WeightingScheme::CombinedPower(_)
    )
}

/// Pivoted-Cholesky rank check on the Gram matrix of the design; returns
/// the indices of dependent columns when the design is rank deficient.
fn rank_check(ds: &Dataset) -> Result<()> {
    let k = ds.k();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..ds.n() {
        let row = ds.row(i);
        for a in 0..k {
            for b in 0..k {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut l = DMatrix::<f64>::zeros(k, k);
    let largest = (0..k).map(|j| g[(j, j)]).fold(0.0_f64, f64::max);
    let tol = 1e-10 * largest.sqrt();
    for step in 0..k {
        // pick the largest remaining diagonal
        let (best, best_val) = (step..k)
            .map(|j| (j, g[(perm[j], perm[j])] - l.row(perm[j]).columns(0, step).norm_squared()))
            .fold((step, f64::NEG_INFINITY), |acc, cur| {
                if cur.1 > acc.1 {
                    cur
                } else {
                    acc
                }
            });
        perm.swap(step, best);
        if best_val.sqrt().max(0.0) <= tol || best_val <= 0.0 {
            return Err(NawtError::RankDeficientDesign(
                perm[step..].to_vec(),
            ));
        }
        let p = perm[step];
        let d = best_val.sqrt();
        l[(p, step)] = d;
        for j in step + 1..k {
            let q = perm[j];
            let mut v = g[(q, p)];
            for s in 0..step {
                v -= l[(q, s)] * l[(p, s)];
            }
            l[(q, step)] = v / d;
        }
    }
    Ok(())
}

/// Newton iteration on the score with step-halving line search on the
/// infinity norm, falling back to Levenberg-Marquardt steps on the squared
/// norm when the Newton direction is unusable.
fn newton_solve(
    ds: &Dataset,
    scheme: WeightingScheme,
    init: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    if has_pseudo_loglik(scheme) {
        return ascend_loglik(ds, scheme, init, tol, max_iter);
    }
    solve_by_norm(ds, scheme, init, tol, max_iter)
}

/// Newton root-finding on the weighted score, with step halving on the
/// score's infinity norm and a Levenberg-Marquardt fallback.
fn solve_by_norm(
    ds: &Dataset,
    scheme: WeightingScheme,
    init: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let mut beta = init;
    let mut s = weighted_score(&beta, ds, scheme)?;
    let mut norm = s.amax();
    for iter in 0..max_iter {
        if norm <= tol {
            return Ok((beta, norm, iter));
        }
        let j = score_jacobian(&beta, ds, scheme)?;
        let mut improved = false;

        if let Some(delta) = j.clone().lu().solve(&(-&s)) {
            let mut step = 1.0;
            for _ in 0..40 {
                let cand = &beta + step * &delta;
                if let Ok(sc) = weighted_score(&cand, ds, scheme) {
                    let cn = sc.amax();
                    if cn.is_finite() && cn < norm {
                        beta = cand;
                        s = sc;
                        norm = cn;
                        improved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
        }

        if !improved {
            // damped least-squares step on 0.5 ||s||^2
            let jtj = j.transpose() * &j;
            let jts = j.transpose() * &s;
            let scale = jtj.diagonal().amax().max(1e-30);
            let mut lambda = 1e-4;
            while lambda <= 1e6 {
                let mut m = jtj.clone();
                for d in 0..m.nrows() {
                    m[(d, d)] += lambda * scale;
                }
                if let Some(delta) = m.lu().solve(&(-&jts)) {
                    let cand = &beta + &delta;
                    if let Ok(sc) = weighted_score(&cand, ds, scheme) {
                        let cn = sc.amax();
                        if cn.is_finite() && cn < norm {
                            beta = cand;
                            s = sc;
                            norm = cn;
                            improved = true;
                            break;
                        }
                    }
                }
                lambda *= 10.0;
            }
        }

        if !improved {
            return Err(NawtError::NonConvergence {
                score_norm: norm,
                iterations: iter,
            });
        }
    }
    if norm <= tol {
        Ok((beta, norm, max_iter))
    } else {
        Err(NawtError::NonConvergence {
            score_norm: norm,
            iterations: max_iter,
        })
    }
}

/// Newton ascent on the pseudo-log-likelihood whose gradient is the
/// weighted score. Monotone in the objective: a step is only taken when it
/// improves the objective, falling back from the Newton direction to
/// steepest ascent. Quasi-separated samples, where the supremum sits at a
/// boundary of the parameter space and no finite root exists, stall with a
/// numerically stationary objective; the stall point is accepted since the
/// fitted probabilities (all that the downstream weighting uses) have
/// converged there.
fn ascend_loglik(
    ds: &Dataset,
    scheme: WeightingScheme,
    init: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let mut beta = init;
    let mut s = weighted_score(&beta, ds, scheme)?;
    let mut norm = s.amax();
    let mut ll = pseudo_loglik(&beta, ds, scheme)?;
    let ftol = 1e-8;
    // Stalls are polished with a score-root refinement: near an interior
    // maximum it pushes the gradient down to the tolerance, while at a
    // boundary supremum it fails (or loses objective value) and the stall
    // point stands.
    let finish = |beta: DVector<f64>, norm: f64, ll: f64, iter: usize| {
        if norm > tol {
            if let Ok((rb, rn, _)) = solve_by_norm(ds, scheme, beta.clone(), tol, 40) {
                if let Ok(rll) = pseudo_loglik(&rb, ds, scheme) {
                    if rll.is_finite() && rll >= ll - 1e-8 * (1.0 + ll.abs()) {
                        return Ok((rb, rn, iter));
                    }
                }
            }
        }
        Ok((beta, norm, iter))
    };
    for iter in 0..max_iter {
        if norm <= tol {
            return Ok((beta, norm, iter));
        }
        let j = score_jacobian(&beta, ds, scheme)?;
        let mut dirs: Vec<DVector<f64>> = Vec::new();
        if let Some(d) = j.clone().lu().solve(&(-&s)) {
            // only an ascent direction when it has positive projection on
            // the gradient (the Hessian need not be definite away from the
            // maximizer)
            if d.dot(&s) > 0.0 && d.iter().all(|v| v.is_finite()) {
                dirs.push(d);
            }
        }
        dirs.push(s.clone());
        let mut improvement = None;
        'outer: for d in dirs {
            let mut step = 1.0;
            for _ in 0..60 {
                let cand = &beta + step * &d;
                if let Ok(cll) = pseudo_loglik(&cand, ds, scheme) {
                    if cll.is_finite() && cll > ll {
                        let sc = weighted_score(&cand, ds, scheme)?;
                        improvement = Some(cll - ll);
                        beta = cand;
                        ll = cll;
                        norm = sc.amax();
                        s = sc;
                        break 'outer;
                    }
                }
                step *= 0.5;
            }
        }
        match improvement {
            // numerically stationary: accept the stall point
            None => return finish(beta, norm, ll, iter),
            Some(gain) if gain <= ftol * (1.0 + ll.abs()) => {
                return finish(beta, norm, ll, iter + 1);
            }
            Some(_) => {}
        }
    }
    // Iteration-capped ascent: on quasi-separated samples the objective
    // keeps improving slowly while beta drifts toward a boundary; the
    // capped point is accepted like any other stall.
    finish(beta, norm, ll, max_iter)
}

/// Fits the propensity model by solving the weighted score equation.
///
/// The plain-logistic scheme starts from zero; every other scheme starts
/// from the plain-logistic maximizer unless the caller supplies an init.
pub fn fit_nawt(ds: &Dataset, scheme: WeightingScheme, options: &FitOptions) -> Result<PropensityFit> {
    scheme.validate()?;
    rank_check(ds)?;
    let k = ds.k();
    let n = ds.n();

    // Solve in column-standardized coordinates: dividing column j by its
    // root-mean-square reparameterizes beta_j -> beta_j * s_j without
    // changing the fitted probabilities, and keeps the Newton iteration
    // well conditioned when covariate magnitudes differ by orders of
    // magnitude. The convergence tolerance applies to the scaled score.
    let scales: Vec<f64> = (0..k)
        .map(|j| {
            let rms = (ds.x.column(j).norm_squared() / n as f64).sqrt();
            if rms > 0.0 { rms } else { 1.0 }
        })
        .collect();
    let mut x_scaled = ds.x.clone();
    for j in 0..k {
        let inv = 1.0 / scales[j];
        for i in 0..n {
            x_scaled[(i, j)] *= inv;
        }
    }
    let ds_scaled = Dataset {
        x: x_scaled,
        t: ds.t.clone(),
        y: ds.y.clone(),
        names: ds.names.clone(),
    };
    // The weighted score has spurious roots where the fitted probabilities
    // degenerate (e.g. all pi -> 0 annihilates every pi^alpha-weighted
    // term), and a zero start can converge to them. Unless the caller
    // supplies a start, non-likelihood schemes therefore start from the
    // plain-logistic maximizer, which sits in the basin of the intended
    // root.
    let init = match &options.init {
        Some(b) => DVector::from_fn(k, |j, _| b[j] * scales[j]),
        None if scheme == WeightingScheme::MleUnit => DVector::zeros(k),
        None => {
            let (mle_beta, _, _) = newton_solve(
                &ds_scaled,
                WeightingScheme::MleUnit,
                DVector::zeros(k),
                options.tol,
                options.max_iter,
            )?;
            mle_beta
        }
    };

    let solved = newton_solve(&ds_scaled, scheme, init, options.tol, options.max_iter)?;
    let (beta_scaled, score_norm, iterations) = solved;
    let beta = DVector::from_fn(k, |j, _| beta_scaled[j] / scales[j]);
    let pi_hat = fitted_probs(&beta, ds);
    let n_clamped = pi_hat
        .iter()
        .filter(|&&p| p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP)
        .count();
    let pseudo_loglik = if has_pseudo_loglik(scheme) {
        pseudo_loglik(&beta, ds, scheme)?
    } else {
        f64::NAN
    };
    Ok(PropensityFit {
        beta,
        separation_warning: n_clamped as f64 > 0.01 * ds.n() as f64,
        pi_hat,
        score_norm,
        iterations,
        pseudo_loglik,
        scheme,
        converged: true,
        n_clamped,
    })
}

/// Per-unit stacked moments and their Jacobian for the GMM. `xt` holds the
/// balance columns, one row per unit.
struct Moments<'a> {
    ds: &'a Dataset,
    xt: DMatrix<f64>,
    scheme: WeightingScheme,
    include_score: bool,
}

impl<'a> Moments<'a> {
    fn dim(&self) -> usize {
        self.xt.ncols() + if self.include_score { self.ds.k() } else { 0 }
    }

    fn mean(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.ds.n();
        let k = self.ds.k();
        let p = self.xt.ncols();
        let off = if self.include_score { k } else { 0 };
        let mut g = DVector::zeros(self.dim());
        for i in 0..n {
            let row = self.ds.row(i);
            let pi = logistic_pi(beta, &row);
            let t = self.ds.t[i] as f64;
            if self.include_score {
                let w = (t - pi) * omega(self.scheme, pi)?;
                for j in 0..k {
                    g[j] += w * row[j];
                }
            }
            let c = t - (1.0 - t) * pi / (1.0 - pi);
            for j in 0..p {
                g[off + j] += c * self.xt[(i, j)];
            }
        }
        Ok(g / n as f64)
    }

    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.ds.n();
        let k = self.ds.k();
        let p = self.xt.ncols();
        let off = if self.include_score { k } else { 0 };
        let mut g = DMatrix::zeros(self.dim(), k);
        for i in 0..n {
            let row = self.ds.row(i);
            let pi = logistic_pi(beta, &row);
            let t = self.ds.t[i] as f64;
            if self.include_score {
                let d = pi * (1.0 - pi)
                    * (-omega(self.scheme, pi)?
                        + (t - pi) * omega_prime(self.scheme, pi)?);
                for a in 0..k {
                    for b in 0..k {
                        g[(a, b)] += d * row[a] * row[b];
                    }
                }
            }
            // d/d eta of -(1-t) pi/(1-pi) is -(1-t) pi/(1-pi)
            let dc = -(1.0 - t) * pi / (1.0 - pi);
            for a in 0..p {
                for b in 0..k {
                    g[(off + a, b)] += dc * self.xt[(i, a)] * row[b];
                }
            }
        }
        Ok(g / n as f64)
    }

    /// Continuously updating covariance with the treatment indicator
    /// integrated out conditional on covariates.
    fn cu_covariance(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.ds.n();
        let k = self.ds.k();
        let p = self.xt.ncols();
        let off = if self.include_score { k } else { 0 };
        let mut sig = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..n {
            let row = self.ds.row(i);
            let pi = logistic_pi(beta, &row);
            if self.include_score {
                let w = omega(self.scheme, pi)?;
                let ss = w * w * pi * (1.0 - pi);
                let sc = w * pi;
                for a in 0..k {
                    for b in 0..k {
                        sig[(a, b)] += ss * row[a] * row[b];
                    }
                    for b in 0..p {
                        sig[(a, off + b)] += sc * row[a] * self.xt[(i, b)];
                        sig[(off + b, a)] += sc * self.xt[(i, b)] * row[a];
                    }
                }
            }
            let cc = pi / (1.0 - pi);
            for a in 0..p {
                for b in 0..p {
                    sig[(off + a, off + b)] += cc * self.xt[(i, a)] * self.xt[(i, b)];
                }
            }
        }
        Ok(sig / n as f64)
    }

    fn weight(&self, beta: &DVector<f64>, kind: WeightMatrixKind) -> Result<DMatrix<f64>> {
        match kind {
            WeightMatrixKind::Identity => Ok(DMatrix::identity(self.dim(), self.dim())),
            WeightMatrixKind::ContinuouslyUpdating => {
                let sig = self.cu_covariance(beta)?;
                match sig.clone().cholesky() {
                    Some(ch) => Ok(ch.inverse()),
                    None => {
                        let svd = sig.svd(false, false);
                        let max = svd.singular_values.max();
                        let min = svd.singular_values.min();
                        Err(NawtError::SingularWeightMatrix(max / min.max(1e-300)))
                    }
                }
            }
        }
    }
}

/// Fits the propensity model by GMM on the stacked weighted-score and
/// covariate-balance moments (or balance only, see `GmmOptions`).
pub fn fit_gmm(
    ds: &Dataset,
    scheme: WeightingScheme,
    balance_cols: &[String],
    options: &GmmOptions,
) -> Result<GmmFit> {
    scheme.validate()?;
    rank_check(ds)?;
    let k = ds.k();
    let n = ds.n();
    if balance_cols.is_empty() {
        return Err(NawtError::InvalidConfig(
            "fit_gmm requires at least one balance column".into(),
        ));
    }
    let idx: Vec<usize> = balance_cols
        .iter()
        .map(|c| ds.column_index(c))
        .collect::<Result<_>>()?;
    let xt = DMatrix::from_fn(n, idx.len(), |i, j| ds.x[(i, idx[j])]);
    let moments = Moments {
        ds,
        xt,
        scheme,
        include_score: options.include_score,
    };

    // Just-identified with identity weight: the minimizer is the exact root
    // of the moment conditions.
    let just_identified =
        moments.dim() == k && options.weight_matrix_kind == WeightMatrixKind::Identity;

    let mut starts = vec![DVector::zeros(k)];
    if let Ok((mle, _, _)) =
        newton_solve(ds, WeightingScheme::MleUnit, DVector::zeros(k), 1e-9, 100)
    {
        starts.push(mle);
    }

    let mut best: Option<(DVector<f64>, f64, usize, bool)> = None;
    let mut last_err: Option<NawtError> = None;
    for start in starts {
        let attempt = if just_identified {
            gmm_root(&moments, start, options)
        } else {
            gmm_minimize(&moments, start, options)
        };
        match attempt {
            Ok((beta, obj, iters, conv)) => {
                if best.as_ref().map_or(true, |b| obj < b.1) {
                    best = Some((beta, obj, iters, conv));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (beta, objective, iterations, converged) = best.ok_or_else(|| {
        last_err.unwrap_or(NawtError::NonConvergence {
            score_norm: f64::NAN,
            iterations: 0,
        })
    })?;
    if !converged {
        return Err(NawtError::NonConvergence {
            score_norm: objective.sqrt(),
            iterations,
        });
    }
    let moment_values = moments.mean(&beta)?.iter().cloned().collect();
    Ok(GmmFit {
        beta,
        objective,
        moment_values,
        weight_matrix_kind: options.weight_matrix_kind,
        balance_cols: balance_cols.to_vec(),
        converged,
        iterations,
    })
}

fn gmm_root(
    m: &Moments<'_>,
    init: DVector<f64>,
    options: &GmmOptions,
) -> Result<(DVector<f64>, f64, usize, bool)> {
    let mut beta = init;
    let mut g = m.mean(&beta)?;
    let mut norm = g.amax();
    for iter in 0..options.max_iter {
        if norm <= options.tol {
            return Ok((beta, g.norm_squared(), iter, true));
        }
        let jac = m.jacobian(&beta)?;
        let delta = match jac.clone().lu().solve(&(-&g)) {
            Some(d) => d,
            None => {
                let jtj = jac.transpose() * &jac;
                let mut damped = jtj.clone();
                let scale = jtj.diagonal().amax().max(1e-30);
                for d in 0..damped.nrows() {
                    damped[(d, d)] += 1e-6 * scale;
                }
                damped
                    .lu()
                    .solve(&(-(jac.transpose() * &g)))
                    .ok_or(NawtError::NonConvergence {
                        score_norm: norm,
                        iterations: iter,
                    })?
            }
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &beta + step * &delta;
            if let Ok(gc) = m.mean(&cand) {
                let cn = gc.amax();
                if cn.is_finite() && cn < norm {
                    beta = cand;
                    g = gc;
                    norm = cn;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            return Err(NawtError::NonConvergence {
                score_norm: norm,
                iterations: iter,
            });
        }
    }
    Err(NawtError::NonConvergence {
        score_norm: norm,
        iterations: options.max_iter,
    })
}

fn gmm_minimize(
    m: &Moments<'_>,
    init: DVector<f64>,
    options: &GmmOptions,
) -> Result<(DVector<f64>, f64, usize, bool)> {
    let mut beta = init;
    let mut a = m.weight(&beta, options.weight_matrix_kind)?;
    let mut g = m.mean(&beta)?;
    let mut obj = (g.transpose() * &a * &g)[(0, 0)];
    for iter in 0..options.max_iter {
        let jac = m.jacobian(&beta)?;
        let grad = jac.transpose() * &a * &g;
        if grad.amax() <= options.tol {
            return Ok((beta, obj, iter, true));
        }
        let h = jac.transpose() * &a * &jac;
        let scale = h.diagonal().amax().max(1e-30);
        let mut delta = None;
        let mut lambda = 0.0;
        loop {
            let mut hd = h.clone();
            if lambda > 0.0 {
                for d in 0..hd.nrows() {
                    hd[(d, d)] += lambda * scale;
                }
            }
            if let Some(step) = hd.lu().solve(&(-&grad)) {
                delta = Some(step);
                break;
            }
            lambda = if lambda == 0.0 { 1e-8 } else { lambda * 100.0 };
            if lambda > 1e4 {
                break;
            }
        }
        let delta = delta.ok_or(NawtError::SingularHessian(f64::INFINITY))?;
        // line search with the weight held fixed; updated after acceptance
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + step * &delta;
            if let Ok(gc) = m.mean(&cand) {
                let cobj = (gc.transpose() * &a * &gc)[(0, 0)];
                if cobj.is_finite() && cobj < obj {
                    beta = cand;
                    g = gc;
                    obj = cobj;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // local minimum w.r.t. the current weight; accept if the
            // gradient is small, otherwise report non-convergence
            return if grad.amax() <= options.tol.max(1e-7) {
                Ok((beta, obj, iter, true))
            } else {
                Err(NawtError::NonConvergence {
                    score_norm: grad.amax(),
                    iterations: iter,
                })
            };
        }
        if options.weight_matrix_kind == WeightMatrixKind::ContinuouslyUpdating {
            a = m.weight(&beta, options.weight_matrix_kind)?;
            obj = (g.transpose() * &a * &g)[(0, 0)];
        }
    }
    Err(NawtError::NonConvergence {
        score_norm: obj.sqrt(),
        iterations: options.max_iter,
    })
}

/// Sandwich covariance of the GMM coefficient estimate:
/// (G'AG)^-1 G'A Sigma A G (G'AG)^-1 / n, with Sigma the sample moment
/// covariance at beta.
pub fn gmm_beta_vcov(ds: &Dataset, fit: &GmmFit, scheme: WeightingScheme) -> Result<DMatrix<f64>> {
    let idx: Vec<usize> = fit
        .balance_cols
        .iter()
        .map(|c| ds.column_index(c))
        .collect::<Result<_>>()?;
    let n = ds.n();
    let xt = DMatrix::from_fn(n, idx.len(), |i, j| ds.x[(i, idx[j])]);
    let include_score = fit.moment_values.len() > idx.len();
    let moments = Moments {
        ds,
        xt,
        scheme,
        include_score,
    };
    let a = moments.weight(&fit.beta, fit.weight_matrix_kind)?;
    let g = moments.jacobian(&fit.beta)?;
    let sigma = moments.cu_covariance(&fit.beta)?;
    let gag = g.transpose() * &a * &g;
    let gag_inv = gag
        .clone()
        .try_inverse()
        .ok_or(NawtError::SingularHessian(f64::INFINITY))?;
    let mid = g.transpose() * &a * sigma * &a * &g;
    Ok((&gag_inv * mid * gag_inv.transpose()) / n as f64)
}
