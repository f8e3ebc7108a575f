//! Python bindings for the nawt library: dataset construction, weighted
//! propensity fitting, effect estimation with sandwich or bootstrap
//! standard errors, adaptive weight selection, and the simulation designs.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use nawt::inference::{self, VarianceMethod};
use nawt::model::{self, EstimandSpec, WeightingScheme};
use nawt::numerics::RngStream;
use nawt::simulation::{MainVariant, ScenarioSpec};
use nawt::solver::{self, FitOptions};

fn err(e: nawt::NawtError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_estimand(s: &str) -> PyResult<EstimandSpec> {
    match s {
        "att" => Ok(EstimandSpec::Att),
        "atc" => Ok(EstimandSpec::Atc),
        "ate" | "ate-separate" => Ok(EstimandSpec::AteSeparate),
        "ate-combined" => Ok(EstimandSpec::AteCombined),
        "ao" => Ok(EstimandSpec::Ao),
        other => Err(PyValueError::new_err(format!(
            "unknown estimand '{other}' (expected att, atc, ate, ate-combined, ao)"
        ))),
    }
}

fn parse_scheme(s: &str, alpha: f64) -> PyResult<WeightingScheme> {
    match s {
        "mle" => Ok(WeightingScheme::MleUnit),
        "power" => Ok(WeightingScheme::PowerPi(alpha)),
        "power-rev" => Ok(WeightingScheme::PowerOneMinusPi(alpha)),
        "combined" => Ok(WeightingScheme::CombinedPower(alpha)),
        "cbps-att" => Ok(WeightingScheme::CbpsAtt),
        "cbps-ate" => Ok(WeightingScheme::CbpsAte),
        other => Err(PyValueError::new_err(format!(
            "unknown scheme '{other}' (expected mle, power, power-rev, combined, cbps-att, cbps-ate)"
        ))),
    }
}

/// A fixed design matrix with treatment indicator and optional outcome.
#[pyclass(name = "Dataset")]
pub struct PyDataset {
    inner: model::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Rows of `x` are units; an intercept column is prepended unless
    /// `add_intercept=False`.
    #[new]
    #[pyo3(signature = (x, t, y=None, names=None, add_intercept=true))]
    fn new(
        x: Vec<Vec<f64>>,
        t: Vec<u8>,
        y: Option<Vec<f64>>,
        names: Option<Vec<String>>,
        add_intercept: bool,
    ) -> PyResult<Self> {
        let n = x.len();
        let k_in = x.first().map_or(0, |r| r.len());
        if x.iter().any(|r| r.len() != k_in) {
            return Err(PyValueError::new_err("ragged covariate rows"));
        }
        let names_in = match names {
            Some(v) => {
                if v.len() != k_in {
                    return Err(PyValueError::new_err(format!(
                        "got {} names for {} columns",
                        v.len(),
                        k_in
                    )));
                }
                v
            }
            None => (1..=k_in).map(|j| format!("x{j}")).collect(),
        };
        let offset = usize::from(add_intercept);
        let mut mat = DMatrix::zeros(n, k_in + offset);
        let mut all_names = Vec::with_capacity(k_in + offset);
        if add_intercept {
            mat.column_mut(0).fill(1.0);
            all_names.push("(intercept)".to_string());
        }
        for (i, row) in x.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                mat[(i, j + offset)] = v;
            }
        }
        all_names.extend(names_in);
        Ok(PyDataset {
            inner: model::Dataset::new(mat, t, y, all_names).map_err(err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn n_treated(&self) -> usize {
        self.inner.n_treated()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names.clone()
    }

    #[getter]
    fn t(&self) -> Vec<u8> {
        self.inner.t.clone()
    }

    #[getter]
    fn y(&self) -> Option<Vec<f64>> {
        self.inner.y.clone()
    }

    /// Design matrix as a list of rows (including the intercept column).
    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n()).map(|i| self.inner.row(i)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, k={}, n_treated={}, has_outcome={})",
            self.inner.n(),
            self.inner.k(),
            self.inner.n_treated(),
            self.inner.y.is_some()
        )
    }
}

/// A solved weighted-score propensity fit.
#[pyclass(name = "PropensityFit")]
pub struct PyPropensityFit {
    inner: solver::PropensityFit,
}

#[pymethods]
impl PyPropensityFit {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.iter().copied().collect()
    }

    #[getter]
    fn pi_hat(&self) -> Vec<f64> {
        self.inner.pi_hat.clone()
    }

    #[getter]
    fn score_norm(&self) -> f64 {
        self.inner.score_norm
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    /// NaN for schemes without a tabulated objective.
    #[getter]
    fn pseudo_loglik(&self) -> f64 {
        self.inner.pseudo_loglik
    }

    #[getter]
    fn scheme(&self) -> String {
        self.inner.scheme.label()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn separation_warning(&self) -> bool {
        self.inner.separation_warning
    }

    fn __repr__(&self) -> String {
        format!(
            "PropensityFit(scheme={}, score_norm={:.3e}, iterations={})",
            self.inner.scheme.label(),
            self.inner.score_norm,
            self.inner.iterations
        )
    }
}

/// Point estimate plus variance report for one estimand.
#[pyclass(name = "EffectResult")]
pub struct PyEffectResult {
    #[pyo3(get)]
    tau: f64,
    #[pyo3(get)]
    se: f64,
    #[pyo3(get)]
    ci95: (f64, f64),
    #[pyo3(get)]
    mu0: f64,
    #[pyo3(get)]
    mu1: f64,
    #[pyo3(get)]
    estimand: String,
    #[pyo3(get)]
    variance_method: String,
    #[pyo3(get)]
    weights: Vec<f64>,
}

#[pymethods]
impl PyEffectResult {
    fn __repr__(&self) -> String {
        format!(
            "EffectResult(estimand={}, tau={:.6}, se={:.6}, ci95=({:.6}, {:.6}))",
            self.estimand, self.tau, self.se, self.ci95.0, self.ci95.1
        )
    }
}

fn estimand_label(e: EstimandSpec) -> &'static str {
    match e {
        EstimandSpec::Att => "att",
        EstimandSpec::Atc => "atc",
        EstimandSpec::AteSeparate => "ate",
        EstimandSpec::AteCombined => "ate-combined",
        EstimandSpec::Ao => "ao",
    }
}

/// Solve the weighted score equations for one scheme.
#[pyfunction]
#[pyo3(signature = (dataset, scheme="power", alpha=2.0, init=None))]
fn fit_propensity(
    dataset: &PyDataset,
    scheme: &str,
    alpha: f64,
    init: Option<Vec<f64>>,
) -> PyResult<PyPropensityFit> {
    let scheme = parse_scheme(scheme, alpha)?;
    let opts = FitOptions {
        init: init.map(DVector::from_vec),
        ..FitOptions::default()
    };
    let inner = solver::fit_nawt(&dataset.inner, scheme, &opts).map_err(err)?;
    Ok(PyPropensityFit { inner })
}

/// Fit the power-family scheme implied by `estimand` at `alpha` and return
/// the weighted effect estimate with a sandwich or bootstrap variance.
#[pyfunction]
#[pyo3(signature = (dataset, estimand="att", alpha=2.0, variance="sandwich", n_boot=500, seed=0))]
fn estimate_effect(
    dataset: &PyDataset,
    estimand: &str,
    alpha: f64,
    variance: &str,
    n_boot: usize,
    seed: u64,
) -> PyResult<PyEffectResult> {
    let spec = parse_estimand(estimand)?;
    let (eff, var) = inference::fit_alpha(&dataset.inner, spec, alpha).map_err(err)?;
    let var = match variance {
        "sandwich" => var,
        "bootstrap" => inference::bootstrap_se(
            &dataset.inner,
            |ds| inference::fit_alpha(ds, spec, alpha).map(|(e, _)| e.tau),
            n_boot,
            seed,
            eff.tau,
        )
        .map_err(err)?,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown variance '{other}' (expected sandwich or bootstrap)"
            )))
        }
    };
    Ok(PyEffectResult {
        tau: eff.tau,
        se: var.se_tau,
        ci95: var.ci95,
        mu0: eff.mu0,
        mu1: eff.mu1,
        estimand: estimand_label(spec).to_string(),
        variance_method: match var.method {
            VarianceMethod::Sandwich => "sandwich".to_string(),
            VarianceMethod::Bootstrap => "bootstrap".to_string(),
        },
        weights: eff.weights,
    })
}

/// Fit every alpha on the grid and pick the smallest sandwich variance.
/// Returns (chosen_alpha, rows) where each row is a dict with keys alpha,
/// tau, se, and error.
#[pyfunction]
#[pyo3(signature = (dataset, estimand="att", alpha_grid=vec![0.0, 1.0, 2.0, 3.0]))]
fn scan_alpha(
    py: Python<'_>,
    dataset: &PyDataset,
    estimand: &str,
    alpha_grid: Vec<f64>,
) -> PyResult<(f64, Vec<Py<PyAny>>)> {
    let spec = parse_estimand(estimand)?;
    let (scheme, rows) =
        inference::adaptive_select(&dataset.inner, spec, &alpha_grid).map_err(err)?;
    let chosen = match scheme {
        WeightingScheme::PowerPi(a) | WeightingScheme::PowerOneMinusPi(a) => a,
        _ => f64::NAN,
    };
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let d = pyo3::types::PyDict::new(py);
        d.set_item("alpha", row.alpha)?;
        d.set_item("tau", row.tau)?;
        d.set_item("se", row.report.as_ref().map(|r| r.se_tau))?;
        d.set_item("error", row.error)?;
        out.push(d.into_any().unbind());
    }
    Ok((chosen, out))
}

/// Draw one replication of a simulation design. `variant` is "a", "b", or
/// "c"; `stream` separates parallel replicates under one seed.
#[pyfunction]
#[pyo3(signature = (variant="a", n=1000, seed=0, stream=0))]
fn simulate_scenario(variant: &str, n: usize, seed: u64, stream: u64) -> PyResult<PyDataset> {
    let v = match variant {
        "a" => MainVariant::A,
        "b" => MainVariant::B,
        "c" => MainVariant::C,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown variant '{other}' (expected a, b, or c)"
            )))
        }
    };
    let mut rng = RngStream::new(seed, stream).rng();
    let inner = ScenarioSpec::main(v, n).generate(&mut rng).map_err(err)?;
    Ok(PyDataset { inner })
}

#[pymodule]
fn nawt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPropensityFit>()?;
    m.add_class::<PyEffectResult>()?;
    m.add_function(wrap_pyfunction!(fit_propensity, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_effect, m)?)?;
    m.add_function(wrap_pyfunction!(scan_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scenario, m)?)?;
    Ok(())
}
