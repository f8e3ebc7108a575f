//! Data-generating processes and the Monte Carlo driver: bias, RMSE, and
//! coverage of competing weighting methods over replicated synthetic data.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NawtError, Result};
use crate::estimands::{estimate_ao, estimate_atc, estimate_ate, estimate_att};
use crate::inference::{fit_alpha, sandwich_ao, sandwich_ate_combined, sandwich_ate_separate, sandwich_att, Z_95};
use crate::model::{sigmoid, Dataset, EstimandSpec, WeightingScheme};
use crate::numerics::RngStream;
use crate::solver::{fit_nawt, FitOptions};

/// The three main simulation designs: (a) correct model, (b) and (c)
/// Kang-Schafer style designs where only nonlinear transforms of the true
/// covariates are observed; (c) flips the sign of the treatment logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MainVariant {
    A,
    B,
    C,
}

/// Estimation-side propensity design for the cubic-outcome family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsModel {
    /// the true index x
    True,
    /// type-1 misspecification: exp(x/3) replaces x
    Mis1,
    /// type-2 misspecification: sqrt(x+4) replaces x
    Mis2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScenarioFamily {
    Main(MainVariant),
    CubicGrid {
        b01: f64,
        b02: f64,
        b03: f64,
        /// treated-arm outcome coefficients index: 1 -> (0,0,1),
        /// 2 -> (0,1,0), 3 -> (-1,0,1)
        treated_model: u8,
        ps_model: PsModel,
    },
    DiscreteIllustration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub family: ScenarioFamily,
    pub n: usize,
}

impl ScenarioSpec {
    pub fn main(variant: MainVariant, n: usize) -> Self {
        ScenarioSpec {
            family: ScenarioFamily::Main(variant),
            n,
        }
    }

    /// True value of the target estimand for this design.
    pub fn true_tau(&self, estimand: EstimandSpec) -> Result<f64> {
        match &self.family {
            ScenarioFamily::Main(_) => Ok(10.0),
            ScenarioFamily::CubicGrid {
                b01,
                b02,
                b03,
                treated_model,
                ..
            } => cubic_true_tau([*b01, *b02, *b03], *treated_model, estimand),
            ScenarioFamily::DiscreteIllustration => Err(NawtError::InvalidConfig(
                "the discrete illustration has no outcome or effect".into(),
            )),
        }
    }

    pub fn generate(&self, rng: &mut impl Rng) -> Result<Dataset> {
        match &self.family {
            ScenarioFamily::Main(v) => Ok(generate_main(*v, self.n, rng)),
            ScenarioFamily::CubicGrid {
                b01,
                b02,
                b03,
                treated_model,
                ps_model,
            } => generate_cubic([*b01, *b02, *b03], *treated_model, *ps_model, self.n, rng),
            ScenarioFamily::DiscreteIllustration => {
                Ok(generate_discrete_illustration(self.n, rng).0)
            }
        }
    }
}

/// Observed covariates for the misspecified main designs: nonlinear
/// transforms of the latent standard-normal draws.
pub(crate) fn main_transform(x: [f64; 4]) -> [f64; 4] {
    [
        (x[0] / 2.0).exp(),
        x[1] / (1.0 + x[0].exp()) + 10.0,
        (x[0] * x[2] / 25.0 + 0.6).powi(3),
        (x[1] + x[3] + 20.0).powi(2),
    ]
}

/// Four-covariate design with outcome mean 210 + 10t + 27.4x1 +
/// 13.7(x2+x3+x4) and unit outcome noise; the treatment logit is
/// x1 - 0.5x2 + 0.25x3 + 0.1x4 (negated under variant C). Variants B and C
/// expose only nonlinear transforms of the latent covariates.
pub fn generate_main(variant: MainVariant, n: usize, rng: &mut impl Rng) -> Dataset {
    let mut x = DMatrix::zeros(n, 5);
    let mut t = vec![0u8; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let z: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let mut logit = z[0] - 0.5 * z[1] + 0.25 * z[2] + 0.1 * z[3];
        if variant == MainVariant::C {
            logit = -logit;
        }
        t[i] = u8::from(rng.random::<f64>() < sigmoid(logit));
        let noise: f64 = StandardNormal.sample(rng);
        y[i] = 210.0
            + 10.0 * t[i] as f64
            + 27.4 * z[0]
            + 13.7 * (z[1] + z[2] + z[3])
            + noise;
        let obs = match variant {
            MainVariant::A => z,
            MainVariant::B | MainVariant::C => main_transform(z),
        };
        x[(i, 0)] = 1.0;
        for j in 0..4 {
            x[(i, 1 + j)] = obs[j];
        }
    }
    let names = vec![
        "intercept".into(),
        "x1".into(),
        "x2".into(),
        "x3".into(),
        "x4".into(),
    ];
    Dataset::new(x, t, Some(y), names).expect("generated design is well formed")
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 4.0 {
            return v;
        }
    }
}

fn cubic_arms(b0: [f64; 3], treated_model: u8) -> Result<([f64; 3], [f64; 3])> {
    let b1 = match treated_model {
        1 => [0.0, 0.0, 1.0],
        2 => [0.0, 1.0, 0.0],
        3 => [-1.0, 0.0, 1.0],
        _ => {
            return Err(NawtError::InvalidConfig(format!(
                "treated_model must be 1, 2, or 3, got {treated_model}"
            )))
        }
    };
    Ok((b0, b1))
}

fn poly3(b: [f64; 3], x: f64) -> f64 {
    b[0] * x + b[1] * x * x + b[2] * x * x * x
}

/// Single-covariate design with cubic-polynomial potential outcomes and
/// treatment probability sigmoid(x); the estimation design column follows
/// `ps_model` so the fitted logistic model can be deliberately wrong.
pub fn generate_cubic(
    b0: [f64; 3],
    treated_model: u8,
    ps_model: PsModel,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    let (b0, b1) = cubic_arms(b0, treated_model)?;
    let mut x = DMatrix::zeros(n, 2);
    let mut t = vec![0u8; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let z = truncated_normal(rng);
        t[i] = u8::from(rng.random::<f64>() < sigmoid(z));
        y[i] = if t[i] == 1 { poly3(b1, z) } else { poly3(b0, z) };
        x[(i, 0)] = 1.0;
        x[(i, 1)] = match ps_model {
            PsModel::True => z,
            PsModel::Mis1 => (z / 3.0).exp(),
            PsModel::Mis2 => (z + 4.0).sqrt(),
        };
    }
    Dataset::new(x, t, Some(y), vec!["intercept".into(), "x".into()])
}

/// Plug-in value of the target effect for a cubic design, from a fixed
/// million-draw sample of the covariate law.
pub fn cubic_true_tau(b0: [f64; 3], treated_model: u8, estimand: EstimandSpec) -> Result<f64> {
    let (b0, b1) = cubic_arms(b0, treated_model)?;
    let mut rng = RngStream::new(0x0C_0FFEE, 0).rng();
    let draws = 1_000_000usize;
    let (mut s_eff, mut s_w) = (0.0, 0.0);
    for _ in 0..draws {
        let z = truncated_normal(&mut rng);
        let eff = poly3(b1, z) - poly3(b0, z);
        let w = match estimand {
            EstimandSpec::Att | EstimandSpec::Ao => sigmoid(z),
            EstimandSpec::Atc => 1.0 - sigmoid(z),
            EstimandSpec::AteSeparate | EstimandSpec::AteCombined => 1.0,
        };
        s_eff += w * eff;
        s_w += w;
    }
    Ok(s_eff / s_w)
}

/// Treated share per covariate level in the discrete illustration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSummary {
    pub x: u32,
    pub n_units: usize,
    pub n_treated: usize,
    pub pi_true: f64,
    /// nonparametric propensity estimate: the treated fraction
    pub pi_np: f64,
}

pub fn discrete_true_pi(x: u32) -> f64 {
    1.0 / (1.0 + (6.5 - 3.5 * (0.5 + x as f64).ln()).exp())
}

/// One discrete covariate uniform over {0,...,10} with a log-shaped true
/// propensity; the returned design is linear in x, so the logistic model
/// is misspecified. No outcomes are generated.
pub fn generate_discrete_illustration(n: usize, rng: &mut impl Rng) -> (Dataset, Vec<LevelSummary>) {
    let mut x = DMatrix::zeros(n, 2);
    let mut t = vec![0u8; n];
    let mut counts = [(0usize, 0usize); 11];
    for i in 0..n {
        let lvl = rng.random_range(0..11u32);
        t[i] = u8::from(rng.random::<f64>() < discrete_true_pi(lvl));
        x[(i, 0)] = 1.0;
        x[(i, 1)] = lvl as f64;
        counts[lvl as usize].0 += 1;
        counts[lvl as usize].1 += t[i] as usize;
    }
    let ds = Dataset::new(x, t, None, vec!["intercept".into(), "x".into()])
        .expect("generated design is well formed");
    let levels = (0..11u32)
        .map(|lvl| {
            let (nu, nt) = counts[lvl as usize];
            LevelSummary {
                x: lvl,
                n_units: nu,
                n_treated: nt,
                pi_true: discrete_true_pi(lvl),
                pi_np: if nu > 0 { nt as f64 / nu as f64 } else { f64::NAN },
            }
        })
        .collect();
    (ds, levels)
}

/// How a method turns a dataset into a point estimate and a 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MethodKind {
    Att(WeightingScheme),
    Atc(WeightingScheme),
    AteSeparate {
        scheme0: WeightingScheme,
        scheme1: WeightingScheme,
    },
    AteCombined(WeightingScheme),
    Ao(WeightingScheme),
    /// per-dataset choice of the power-family alpha minimizing the
    /// sandwich variance
    Adaptive {
        estimand: EstimandSpec,
        grid: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub label: String,
    pub kind: MethodKind,
}

impl Method {
    pub fn nawt_att(alpha: f64) -> Self {
        Method {
            label: format!("nawt-att-alpha{alpha}"),
            kind: MethodKind::Att(WeightingScheme::PowerPi(alpha)),
        }
    }

    pub fn ipw_att() -> Self {
        Method {
            label: "ipw-att".into(),
            kind: MethodKind::Att(WeightingScheme::MleUnit),
        }
    }

    pub fn cbps_att() -> Self {
        Method {
            label: "cbps-att".into(),
            kind: MethodKind::Att(WeightingScheme::CbpsAtt),
        }
    }

    pub fn nawt_ate_separate(alpha: f64) -> Self {
        Method {
            label: format!("nawt-ate-separate-alpha{alpha}"),
            kind: MethodKind::AteSeparate {
                scheme0: WeightingScheme::PowerPi(alpha),
                scheme1: WeightingScheme::PowerOneMinusPi(alpha),
            },
        }
    }

    pub fn nawt_ate_combined(alpha: f64) -> Self {
        Method {
            label: format!("nawt-ate-combined-alpha{alpha}"),
            kind: MethodKind::AteCombined(WeightingScheme::CombinedPower(alpha)),
        }
    }

    pub fn ipw_ate() -> Self {
        Method {
            label: "ipw-ate".into(),
            kind: MethodKind::AteCombined(WeightingScheme::MleUnit),
        }
    }

    pub fn adaptive(estimand: EstimandSpec, grid: Vec<f64>) -> Self {
        let tags: Vec<String> = grid.iter().map(|a| a.to_string()).collect();
        Method {
            label: format!("adaptive-{}", tags.join("-")),
            kind: MethodKind::Adaptive { estimand, grid },
        }
    }

    /// Point estimate with its 95% sandwich interval.
    pub fn run(&self, ds: &Dataset) -> Result<(f64, (f64, f64))> {
        let opts = FitOptions::default();
        match &self.kind {
            MethodKind::Att(scheme) => {
                let fit = fit_nawt(ds, *scheme, &opts)?;
                let eff = estimate_att(ds, &fit)?;
                let var = sandwich_att(ds, &fit, &eff)?;
                Ok((eff.tau, var.ci95))
            }
            MethodKind::Atc(scheme) => {
                let flipped = ds.relabeled();
                let fit = fit_nawt(&flipped, *scheme, &opts)?;
                let eff_att = estimate_att(&flipped, &fit)?;
                let var = sandwich_att(&flipped, &fit, &eff_att)?;
                let eff = estimate_atc(ds, &fit)?;
                Ok((
                    eff.tau,
                    (eff.tau - Z_95 * var.se_tau, eff.tau + Z_95 * var.se_tau),
                ))
            }
            MethodKind::AteSeparate { scheme0, scheme1 } => {
                let fit0 = fit_nawt(ds, *scheme0, &opts)?;
                let fit1 = fit_nawt(ds, *scheme1, &opts)?;
                let eff = estimate_ate(ds, &fit0, &fit1)?;
                let var = sandwich_ate_separate(ds, &fit0, &fit1, &eff)?;
                Ok((eff.tau, var.ci95))
            }
            MethodKind::AteCombined(scheme) => {
                let fit = fit_nawt(ds, *scheme, &opts)?;
                let eff = estimate_ate(ds, &fit, &fit)?;
                let var = sandwich_ate_combined(ds, &fit, &eff)?;
                Ok((eff.tau, var.ci95))
            }
            MethodKind::Ao(scheme) => {
                let fit = fit_nawt(ds, *scheme, &opts)?;
                let eff = estimate_ao(ds, &fit)?;
                let var = sandwich_ao(ds, &fit, &eff)?;
                Ok((eff.tau, var.ci95))
            }
            MethodKind::Adaptive { estimand, grid } => {
                let mut best: Option<(f64, f64, (f64, f64))> = None;
                for &alpha in grid {
                    if let Ok((eff, var)) = fit_alpha(ds, *estimand, alpha) {
                        if best.as_ref().map_or(true, |b| var.se_tau < b.0) {
                            best = Some((var.se_tau, eff.tau, var.ci95));
                        }
                    }
                }
                let (_, tau, ci) = best.ok_or(NawtError::NonConvergence {
                    score_norm: f64::NAN,
                    iterations: 0,
                })?;
                Ok((tau, ci))
            }
        }
    }
}

/// One method's aggregates over the Monte Carlo replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRow {
    pub method: String,
    pub bias: f64,
    pub rmse: f64,
    pub coverage95: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: ScenarioSpec,
    pub true_tau: f64,
    pub seed: u64,
    pub n_replicates: usize,
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,bias,rmse,coverage95,n_replicates,n_failed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.bias, r.rmse, r.coverage95, r.n_replicates, r.n_failed
            ));
        }
        out
    }
}

/// Runs `replicates` independent datasets; replicate r draws from the
/// stream (seed, r), so any level of parallelism yields identical results.
/// Failed fits are dropped per method; a method failing on more than 10%
/// of replicates aborts the run.
pub fn run_monte_carlo(
    scenario: &ScenarioSpec,
    estimand: EstimandSpec,
    methods: &[Method],
    replicates: usize,
    seed: u64,
    parallelism: usize,
) -> Result<McReport> {
    if replicates == 0 {
        return Err(NawtError::InvalidConfig("replicates must be >= 1".into()));
    }
    if methods.is_empty() {
        return Err(NawtError::InvalidConfig("no methods requested".into()));
    }
    let true_tau = scenario.true_tau(estimand)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| NawtError::InvalidConfig(format!("thread pool: {e}")))?;
    // per replicate, per method: Some((tau, covered)) on success
    let results: Vec<Vec<Option<(f64, bool)>>> = pool.install(|| {
        (0..replicates as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = RngStream::new(seed, r).rng();
                let ds = match scenario.generate(&mut rng) {
                    Ok(ds) => ds,
                    Err(_) => return vec![None; methods.len()],
                };
                methods
                    .iter()
                    .map(|m| {
                        m.run(&ds).ok().map(|(tau, ci)| {
                            (tau, ci.0 <= true_tau && true_tau <= ci.1)
                        })
                    })
                    .collect()
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(methods.len());
    for (j, m) in methods.iter().enumerate() {
        let taus: Vec<(f64, bool)> = results.iter().filter_map(|rep| rep[j]).collect();
        let n_failed = replicates - taus.len();
        if n_failed as f64 > 0.10 * replicates as f64 {
            return Err(NawtError::TooManyFailures {
                failed: n_failed,
                total: replicates,
            });
        }
        let k = taus.len() as f64;
        let mean = taus.iter().map(|(t, _)| t).sum::<f64>() / k;
        let rmse = (taus.iter().map(|(t, _)| (t - true_tau).powi(2)).sum::<f64>() / k).sqrt();
        let coverage = taus.iter().filter(|(_, c)| *c).count() as f64 / k;
        rows.push(McRow {
            method: m.label.clone(),
            bias: mean - true_tau,
            rmse,
            coverage95: coverage,
            n_replicates: taus.len(),
            n_failed,
        });
    }
    Ok(McReport {
        scenario: scenario.clone(),
        true_tau,
        seed,
        n_replicates: replicates,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn main_scenario_balanced_treatment() {
        let mut rng = RngStream::new(1, 0).rng();
        let ds = generate_main(MainVariant::A, 10_000, &mut rng);
        let p = ds.n_treated() as f64 / ds.n() as f64;
        assert!((p - 0.5).abs() < 0.02, "Pr(t=1) = {p}");
    }

    #[test]
    fn main_transform_values() {
        let o = main_transform([0.0, 0.0, 0.0, 0.0]);
        assert_eq!(o[0], 1.0);
        assert_eq!(o[1], 10.0);
        assert!((o[2] - 0.216).abs() < 1e-12);
        assert_eq!(o[3], 400.0);
    }

    #[test]
    fn main_c_flips_selection() {
        // variant C reverses the treatment logit, so the treated mean of
        // the first latent covariate flips sign relative to variant A
        let mut rng = RngStream::new(2, 0).rng();
        let ds_a = generate_main(MainVariant::A, 20_000, &mut rng);
        let mut rng = RngStream::new(2, 0).rng();
        let ds_c = generate_main(MainVariant::C, 20_000, &mut rng);
        let treated_mean = |ds: &Dataset, col: usize| {
            let mut s = 0.0;
            for i in 0..ds.n() {
                if ds.t[i] == 1 {
                    s += ds.x[(i, col)];
                }
            }
            s / ds.n_treated() as f64
        };
        assert!(treated_mean(&ds_a, 1) > 0.2);
        // variant C observes exp(x1/2); selection on -x1 pushes it below 1
        assert!(treated_mean(&ds_c, 1) < 1.0);
    }

    #[test]
    fn cubic_truncation_and_identical_arms() {
        let mut rng = RngStream::new(3, 0).rng();
        let ds = generate_cubic([1.0, 0.0, 0.0], 1, PsModel::True, 5000, &mut rng).unwrap();
        for i in 0..ds.n() {
            assert!(ds.x[(i, 1)].abs() <= 4.0);
        }
        // identical potential-outcome arms have a zero effect by construction
        let tau = cubic_true_tau([0.0, 0.0, 1.0], 1, EstimandSpec::AteSeparate).unwrap();
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn cubic_misspecified_design_column() {
        let mut rng = RngStream::new(3, 1).rng();
        let ds = generate_cubic([1.0, 0.0, 0.0], 1, PsModel::Mis2, 100, &mut rng).unwrap();
        for i in 0..ds.n() {
            let v = ds.x[(i, 1)];
            assert!(v >= 0.0 && v <= 8f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn discrete_true_pi_endpoints() {
        assert!((discrete_true_pi(10) - 0.845).abs() < 5e-3);
        assert!((discrete_true_pi(0) - 0.000136).abs() < 5e-6);
    }

    #[test]
    fn discrete_nonparametric_close_to_truth() {
        let mut rng = RngStream::new(4, 0).rng();
        let (_, levels) = generate_discrete_illustration(50_000, &mut rng);
        for l in &levels {
            let se = (l.pi_true * (1.0 - l.pi_true) / l.n_units as f64).sqrt();
            assert!(
                (l.pi_np - l.pi_true).abs() <= 3.5 * se + 1e-9,
                "level {}: np {} vs true {}",
                l.x,
                l.pi_np,
                l.pi_true
            );
        }
    }

    #[test]
    fn monte_carlo_single_replicate_rmse_is_abs_bias() {
        let spec = ScenarioSpec::main(MainVariant::A, 400);
        let rep = run_monte_carlo(
            &spec,
            EstimandSpec::Att,
            &[Method::ipw_att()],
            1,
            5,
            1,
        )
        .unwrap();
        let row = &rep.rows[0];
        assert!((row.rmse - row.bias.abs()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_rmse_decomposition() {
        let spec = ScenarioSpec::main(MainVariant::A, 300);
        let methods = [Method::nawt_att(2.0)];
        let rep = run_monte_carlo(&spec, EstimandSpec::Att, &methods, 20, 6, 1).unwrap();
        // recompute replicate estimates serially to verify rmse^2 = bias^2 + var
        let mut taus = Vec::new();
        for r in 0..20u64 {
            let mut rng = RngStream::new(6, r).rng();
            let ds = spec.generate(&mut rng).unwrap();
            taus.push(methods[0].run(&ds).unwrap().0);
        }
        let m = taus.iter().sum::<f64>() / taus.len() as f64;
        let var = taus.iter().map(|t| (t - m).powi(2)).sum::<f64>() / taus.len() as f64;
        let row = &rep.rows[0];
        assert!((row.rmse.powi(2) - (row.bias.powi(2) + var)).abs() < 1e-10);
        assert!(row.rmse >= row.bias.abs());
    }

    #[test]
    fn monte_carlo_parallelism_invariant() {
        let spec = ScenarioSpec::main(MainVariant::A, 300);
        let methods = [Method::nawt_att(2.0), Method::ipw_att()];
        let a = run_monte_carlo(&spec, EstimandSpec::Att, &methods, 8, 7, 1).unwrap();
        let b = run_monte_carlo(&spec, EstimandSpec::Att, &methods, 8, 7, 4).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn monte_carlo_rejects_empty_requests() {
        let spec = ScenarioSpec::main(MainVariant::A, 100);
        assert!(run_monte_carlo(&spec, EstimandSpec::Att, &[], 5, 1, 1).is_err());
        assert!(
            run_monte_carlo(&spec, EstimandSpec::Att, &[Method::ipw_att()], 0, 1, 1).is_err()
        );
    }
}
