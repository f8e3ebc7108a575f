//! Command-line front end: flag/config-file parsing, command dispatch, and
//! deterministic JSON/CSV report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{NawtError, Result};
use crate::estimands::{estimate_ao, estimate_atc, estimate_ate, estimate_att, EffectEstimate};
use crate::inference::{
    bootstrap_se, sandwich_ao, sandwich_ate_combined, sandwich_ate_separate, sandwich_att,
    VarianceMethod, VarianceReport,
};
use crate::model::{load_csv, logistic_pi, Dataset, EstimandSpec, WeightingScheme};
use crate::numerics::{control_loglik_term, treated_loglik_term, RngStream};
use crate::simulation::{
    generate_discrete_illustration, MainVariant, McReport, Method, MethodKind, PsModel,
    ScenarioFamily, ScenarioSpec,
};
use crate::solver::{fit_gmm, fit_nawt, weighted_score, FitOptions, GmmOptions, PropensityFit};

#[derive(Parser, Debug, Default)]
#[command(
    name = "nawt",
    about = "Navigated weighting: estimand-tailored propensity scores and weighted treatment effects",
    disable_help_subcommand = true
)]
pub struct CliArgs {
    /// Config file of `key = value` lines; flags override file entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of: fit, simulate, scan-alpha, illustrate
    #[arg(long)]
    pub command: Option<String>,
    /// Input CSV for fit / single-dataset scan-alpha
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// att | atc | ate-separate | ate-combined | ao
    #[arg(long)]
    pub estimand: Option<String>,
    /// mle | power | power-rev | combined | cbps-att | cbps-ate
    #[arg(long)]
    pub scheme: Option<String>,
    /// Exponent of the power weighting families
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated covariate-balance columns (switches to GMM)
    #[arg(long)]
    pub balance: Option<String>,
    /// sandwich | bootstrap
    #[arg(long)]
    pub variance: Option<String>,
    #[arg(long)]
    pub n_boot: Option<usize>,
    /// a | b | c | cubic | discrete
    #[arg(long)]
    pub scenario: Option<String>,
    /// Units per generated dataset
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json | csv
    #[arg(long)]
    pub format: Option<String>,
    /// Treatment column name in input CSV
    #[arg(long)]
    pub treatment: Option<String>,
    /// Outcome column name in input CSV
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariate columns; all remaining columns by default
    #[arg(long)]
    pub covariates: Option<String>,
    /// Comma-separated alpha grid for scan-alpha
    #[arg(long)]
    pub alpha_grid: Option<String>,
    /// Worker threads for Monte Carlo / bootstrap work
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// CubicGrid control-arm coefficients
    #[arg(long)]
    pub b01: Option<f64>,
    #[arg(long)]
    pub b02: Option<f64>,
    #[arg(long)]
    pub b03: Option<f64>,
    /// CubicGrid treated-arm model: 1, 2, or 3
    #[arg(long)]
    pub treated_model: Option<u8>,
    /// CubicGrid estimation design: true | mis1 | mis2
    #[arg(long)]
    pub ps_model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Simulate,
    ScanAlpha,
    Illustrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Fully resolved run configuration: config-file values overridden by
/// flags, with defaults applied and a hash of the merged settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub estimand: EstimandSpec,
    pub scheme_name: String,
    pub alpha: f64,
    pub balance: Vec<String>,
    pub variance: VarianceMethod,
    pub n_boot: usize,
    pub scenario: Option<String>,
    pub n: usize,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub treatment: String,
    pub outcome: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub alpha_grid: Vec<f64>,
    pub parallelism: usize,
    pub b01: f64,
    pub b02: f64,
    pub b03: f64,
    pub treated_model: u8,
    pub ps_model: PsModel,
    pub config_hash: String,
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    parse_list(s)
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| NawtError::InvalidConfig(format!("invalid number '{v}' in list")))
        })
        .collect()
}

/// Reads a `key = value` config file; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            NawtError::InvalidConfig(format!(
                "config line {}: expected 'key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

const CONFIG_KEYS: &[&str] = &[
    "command",
    "input",
    "estimand",
    "scheme",
    "alpha",
    "balance",
    "variance",
    "n_boot",
    "scenario",
    "n",
    "replicates",
    "seed",
    "out",
    "format",
    "treatment",
    "outcome",
    "covariates",
    "alpha_grid",
    "parallelism",
    "b01",
    "b02",
    "b03",
    "treated_model",
    "ps_model",
];

fn merged_settings(args: &CliArgs) -> Result<BTreeMap<String, String>> {
    let mut map = match &args.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    for key in map.keys() {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(NawtError::InvalidConfig(format!(
                "unknown config key '{key}'"
            )));
        }
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    put("command", args.command.clone());
    put("input", args.input.as_ref().map(|p| p.display().to_string()));
    put("estimand", args.estimand.clone());
    put("scheme", args.scheme.clone());
    put("alpha", args.alpha.map(|v| v.to_string()));
    put("balance", args.balance.clone());
    put("variance", args.variance.clone());
    put("n_boot", args.n_boot.map(|v| v.to_string()));
    put("scenario", args.scenario.clone());
    put("n", args.n.map(|v| v.to_string()));
    put("replicates", args.replicates.map(|v| v.to_string()));
    put("seed", args.seed.map(|v| v.to_string()));
    put("out", args.out.as_ref().map(|p| p.display().to_string()));
    put("format", args.format.clone());
    put("treatment", args.treatment.clone());
    put("outcome", args.outcome.clone());
    put("covariates", args.covariates.clone());
    put("alpha_grid", args.alpha_grid.clone());
    put("parallelism", args.parallelism.map(|v| v.to_string()));
    put("b01", args.b01.map(|v| v.to_string()));
    put("b02", args.b02.map(|v| v.to_string()));
    put("b03", args.b03.map(|v| v.to_string()));
    put("treated_model", args.treated_model.map(|v| v.to_string()));
    put("ps_model", args.ps_model.clone());
    Ok(map)
}

fn settings_hash(map: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in map {
        // `out` affects where the report lands, not what it contains
        if k == "out" {
            continue;
        }
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn resolve(args: &CliArgs) -> Result<RunConfig> {
        let map = merged_settings(args)?;
        let config_hash = settings_hash(&map);
        let get = |k: &str| map.get(k).map(|s| s.as_str());
        let bad = |k: &str, v: &str| NawtError::InvalidConfig(format!("invalid {k} '{v}'"));

        let command = match get("command") {
            Some("fit") => Command::Fit,
            Some("simulate") => Command::Simulate,
            Some("scan-alpha") => Command::ScanAlpha,
            Some("illustrate") => Command::Illustrate,
            Some(other) => return Err(bad("command", other)),
            None => {
                return Err(NawtError::InvalidConfig(
                    "missing required setting 'command'".into(),
                ))
            }
        };
        let estimand = match get("estimand").unwrap_or("att") {
            "att" => EstimandSpec::Att,
            "atc" => EstimandSpec::Atc,
            "ate-separate" => EstimandSpec::AteSeparate,
            "ate-combined" => EstimandSpec::AteCombined,
            "ao" => EstimandSpec::Ao,
            other => return Err(bad("estimand", other)),
        };
        let parse = |k: &str| -> Result<Option<f64>> {
            get(k)
                .map(|v| v.parse::<f64>().map_err(|_| bad(k, v)))
                .transpose()
        };
        let parse_usize = |k: &str| -> Result<Option<usize>> {
            get(k)
                .map(|v| v.parse::<usize>().map_err(|_| bad(k, v)))
                .transpose()
        };
        let default_scheme = match estimand {
            EstimandSpec::AteCombined => "combined",
            EstimandSpec::AteSeparate => "power",
            _ => "power",
        };
        let scheme_name = get("scheme").unwrap_or(default_scheme).to_string();
        if !["mle", "power", "power-rev", "combined", "cbps-att", "cbps-ate"]
            .contains(&scheme_name.as_str())
        {
            return Err(bad("scheme", &scheme_name));
        }
        let variance = match get("variance").unwrap_or("sandwich") {
            "sandwich" => VarianceMethod::Sandwich,
            "bootstrap" => VarianceMethod::Bootstrap,
            other => return Err(bad("variance", other)),
        };
        let format = match get("format").unwrap_or("json") {
            "json" => OutputFormat::Json,
            "csv" => OutputFormat::Csv,
            other => return Err(bad("format", other)),
        };
        let ps_model = match get("ps_model").unwrap_or("true") {
            "true" => PsModel::True,
            "mis1" => PsModel::Mis1,
            "mis2" => PsModel::Mis2,
            other => return Err(bad("ps_model", other)),
        };
        let seed = get("seed")
            .map(|v| v.parse::<u64>().map_err(|_| bad("seed", v)))
            .transpose()?;
        let needs_seed = matches!(command, Command::Simulate | Command::Illustrate)
            || (command == Command::ScanAlpha && get("input").is_none())
            || variance == VarianceMethod::Bootstrap;
        if needs_seed && seed.is_none() {
            return Err(NawtError::InvalidConfig(
                "a --seed is required for stochastic commands (simulate, illustrate, \
                 scan-alpha over scenarios, bootstrap)"
                    .into(),
            ));
        }
        let replicates = parse_usize("replicates")?.unwrap_or(500);
        if command == Command::Simulate && replicates == 0 {
            return Err(NawtError::InvalidConfig("replicates must be >= 1".into()));
        }
        let treated_model = match get("treated_model").unwrap_or("1") {
            v => v.parse::<u8>().map_err(|_| bad("treated_model", v))?,
        };
        Ok(RunConfig {
            command,
            input: get("input").map(PathBuf::from),
            estimand,
            scheme_name,
            alpha: parse("alpha")?.unwrap_or(2.0),
            balance: get("balance").map(parse_list).unwrap_or_default(),
            variance,
            n_boot: parse_usize("n_boot")?.unwrap_or(500),
            scenario: get("scenario").map(|s| s.to_string()),
            n: parse_usize("n")?.unwrap_or(1000),
            replicates,
            seed,
            out: get("out").map(PathBuf::from),
            format,
            treatment: get("treatment").unwrap_or("t").to_string(),
            outcome: get("outcome").map(|s| s.to_string()),
            covariates: get("covariates").map(|s| parse_list(s)),
            alpha_grid: get("alpha_grid")
                .map(parse_f64_list)
                .transpose()?
                .unwrap_or_else(|| vec![0.0, 1.0, 2.0, 3.0]),
            parallelism: parse_usize("parallelism")?.unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |v| v.get())
            }),
            b01: parse("b01")?.unwrap_or(1.0),
            b02: parse("b02")?.unwrap_or(0.0),
            b03: parse("b03")?.unwrap_or(0.0),
            treated_model,
            ps_model,
            config_hash,
        })
    }

    /// Primary-arm weighting scheme from the scheme name and alpha.
    pub fn scheme(&self) -> WeightingScheme {
        match self.scheme_name.as_str() {
            "mle" => WeightingScheme::MleUnit,
            "power" => WeightingScheme::PowerPi(self.alpha),
            "power-rev" => WeightingScheme::PowerOneMinusPi(self.alpha),
            "combined" => WeightingScheme::CombinedPower(self.alpha),
            "cbps-att" => WeightingScheme::CbpsAtt,
            "cbps-ate" => WeightingScheme::CbpsAte,
            other => unreachable!("scheme '{other}' validated at resolve time"),
        }
    }

    /// Treated-arm scheme for separate ATE estimation: the power family
    /// flips to (1-pi)^alpha; symmetric schemes are reused as-is.
    pub fn scheme_treated_arm(&self) -> WeightingScheme {
        match self.scheme_name.as_str() {
            "power" => WeightingScheme::PowerOneMinusPi(self.alpha),
            "power-rev" => WeightingScheme::PowerPi(self.alpha),
            _ => self.scheme(),
        }
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let name = self.scenario.as_deref().ok_or_else(|| {
            NawtError::InvalidConfig("this command requires --scenario".into())
        })?;
        let family = match name {
            "a" => ScenarioFamily::Main(MainVariant::A),
            "b" => ScenarioFamily::Main(MainVariant::B),
            "c" => ScenarioFamily::Main(MainVariant::C),
            "cubic" => ScenarioFamily::CubicGrid {
                b01: self.b01,
                b02: self.b02,
                b03: self.b03,
                treated_model: self.treated_model,
                ps_model: self.ps_model,
            },
            "discrete" => ScenarioFamily::DiscreteIllustration,
            other => {
                return Err(NawtError::InvalidConfig(format!(
                    "invalid scenario '{other}'"
                )))
            }
        };
        Ok(ScenarioSpec {
            family,
            n: self.n,
        })
    }
}

// ---------------------------------------------------------------------------
// report emission

/// Flattens a JSON document into (dotted-path, value) rows so the CSV
/// rendering carries exactly the same printed numbers as the JSON one.
fn flatten_json(prefix: &str, value: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&path, v, rows);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_json(&format!("{prefix}[{i}]"), v, rows);
            }
        }
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

fn render<T: Serialize>(report: &T, format: OutputFormat) -> Result<String> {
    let value = serde_json::to_value(report)?;
    match format {
        OutputFormat::Json => Ok(format!("{}\n", serde_json::to_string_pretty(&value)?)),
        OutputFormat::Csv => {
            let mut rows = Vec::new();
            flatten_json("", &value, &mut rows);
            let mut out = String::from("field,value\n");
            for (k, v) in rows {
                out.push_str(&format!("{k},{v}\n"));
            }
            Ok(out)
        }
    }
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Serialize)]
struct PiSummary {
    min: f64,
    mean: f64,
    max: f64,
    n_clamped: usize,
}

#[derive(Debug, Serialize)]
struct BalanceRow {
    column: String,
    treated_weighted_mean: f64,
    control_weighted_mean: f64,
    difference: f64,
}

#[derive(Debug, Serialize)]
struct FitReport {
    command: &'static str,
    config_hash: String,
    seed: Option<u64>,
    estimand: String,
    scheme: String,
    converged: bool,
    iterations: usize,
    score_norm: f64,
    beta: Vec<(String, f64)>,
    pi_summary: PiSummary,
    tau: f64,
    se: f64,
    ci95: [f64; 2],
    variance_method: String,
    n_boot: Option<usize>,
    n_boot_failed: Option<usize>,
    gmm_objective: Option<f64>,
    balance_table: Vec<BalanceRow>,
}

fn estimand_label(e: EstimandSpec) -> &'static str {
    match e {
        EstimandSpec::Att => "att",
        EstimandSpec::Atc => "atc",
        EstimandSpec::AteSeparate => "ate-separate",
        EstimandSpec::AteCombined => "ate-combined",
        EstimandSpec::Ao => "ao",
    }
}

fn pi_summary(fit: &PropensityFit) -> PiSummary {
    let min = fit.pi_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fit.pi_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = fit.pi_hat.iter().sum::<f64>() / fit.pi_hat.len() as f64;
    PiSummary {
        min,
        mean,
        max,
        n_clamped: fit.n_clamped,
    }
}

/// Weighted covariate means by arm under the estimand's implied weights.
fn balance_table(ds: &Dataset, fit: &PropensityFit, estimand: EstimandSpec) -> Vec<BalanceRow> {
    let n = ds.n();
    let k = ds.k();
    let weight = |i: usize| -> (f64, f64) {
        let pi = fit.pi_hat[i];
        match estimand {
            EstimandSpec::Att | EstimandSpec::Ao => (1.0, pi / (1.0 - pi)),
            EstimandSpec::Atc => ((1.0 - pi) / pi, 1.0),
            EstimandSpec::AteSeparate | EstimandSpec::AteCombined => {
                (1.0 / pi, 1.0 / (1.0 - pi))
            }
        }
    };
    let (mut w1_sum, mut w0_sum) = (0.0, 0.0);
    let mut s1 = vec![0.0; k];
    let mut s0 = vec![0.0; k];
    for i in 0..n {
        let (w1, w0) = weight(i);
        let row = ds.row(i);
        if ds.t[i] == 1 {
            w1_sum += w1;
            for j in 0..k {
                s1[j] += w1 * row[j];
            }
        } else {
            w0_sum += w0;
            for j in 0..k {
                s0[j] += w0 * row[j];
            }
        }
    }
    (0..k)
        .map(|j| {
            let a = s1[j] / w1_sum;
            let b = s0[j] / w0_sum;
            BalanceRow {
                column: ds.names[j].clone(),
                treated_weighted_mean: a,
                control_weighted_mean: b,
                difference: a - b,
            }
        })
        .collect()
}

fn load_input(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| NawtError::InvalidConfig("fit requires --input".into()))?;
    let covariates = match &cfg.covariates {
        Some(cols) => cols.clone(),
        None => {
            let mut reader = csv::Reader::from_path(path)?;
            reader
                .headers()?
                .iter()
                .map(|s| s.to_string())
                .filter(|h| h != &cfg.treatment && Some(h.as_str()) != cfg.outcome.as_deref())
                .collect()
        }
    };
    load_csv(path, &cfg.treatment, cfg.outcome.as_deref(), &covariates, true)
}

/// Fits the propensity model per the config: plain weighted-score solve,
/// or GMM when balance columns are requested. Returns the fit in
/// `PropensityFit` form plus the GMM objective when applicable.
fn fit_propensity(
    ds: &Dataset,
    cfg: &RunConfig,
    scheme: WeightingScheme,
) -> Result<(PropensityFit, Option<f64>)> {
    if cfg.balance.is_empty() {
        return Ok((fit_nawt(ds, scheme, &FitOptions::default())?, None));
    }
    let gmm = fit_gmm(ds, scheme, &cfg.balance, &GmmOptions::default())?;
    let pi_hat: Vec<f64> = (0..ds.n())
        .map(|i| logistic_pi(&gmm.beta, &ds.row(i)))
        .collect();
    let score = weighted_score(&gmm.beta, ds, scheme)?;
    let fit = PropensityFit {
        beta: gmm.beta.clone(),
        pi_hat,
        score_norm: score.amax(),
        iterations: gmm.iterations,
        pseudo_loglik: f64::NAN,
        scheme,
        converged: gmm.converged,
        n_clamped: 0,
        separation_warning: false,
    };
    Ok((fit, Some(gmm.objective)))
}

fn point_estimate(
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(EffectEstimate, PropensityFit, Option<f64>)> {
    match cfg.estimand {
        EstimandSpec::Att => {
            let (fit, obj) = fit_propensity(ds, cfg, cfg.scheme())?;
            let eff = estimate_att(ds, &fit)?;
            Ok((eff, fit, obj))
        }
        EstimandSpec::Atc => {
            let flipped = ds.relabeled();
            let (fit, obj) = fit_propensity(&flipped, cfg, cfg.scheme())?;
            let eff = estimate_atc(ds, &fit)?;
            Ok((eff, fit, obj))
        }
        EstimandSpec::AteSeparate => {
            let (fit0, obj) = fit_propensity(ds, cfg, cfg.scheme())?;
            let (fit1, _) = fit_propensity(ds, cfg, cfg.scheme_treated_arm())?;
            let eff = estimate_ate(ds, &fit0, &fit1)?;
            Ok((eff, fit0, obj))
        }
        EstimandSpec::AteCombined => {
            let (fit, obj) = fit_propensity(ds, cfg, cfg.scheme())?;
            let eff = estimate_ate(ds, &fit, &fit)?;
            Ok((eff, fit, obj))
        }
        EstimandSpec::Ao => {
            let (fit, obj) = fit_propensity(ds, cfg, cfg.scheme())?;
            let eff = estimate_ao(ds, &fit)?;
            Ok((eff, fit, obj))
        }
    }
}

fn variance_for(
    ds: &Dataset,
    cfg: &RunConfig,
    eff: &EffectEstimate,
    fit: &PropensityFit,
) -> Result<VarianceReport> {
    match cfg.variance {
        VarianceMethod::Sandwich => {
            if !cfg.balance.is_empty() {
                return Err(NawtError::InvalidConfig(
                    "sandwich variance is not available with balance constraints; \
                     use --variance bootstrap"
                        .into(),
                ));
            }
            match cfg.estimand {
                EstimandSpec::Att => sandwich_att(ds, fit, eff),
                EstimandSpec::Atc => {
                    let flipped = ds.relabeled();
                    let eff_att = estimate_att(&flipped, fit)?;
                    let mut rep = sandwich_att(&flipped, fit, &eff_att)?;
                    rep.ci95 = (
                        eff.tau - crate::inference::Z_95 * rep.se_tau,
                        eff.tau + crate::inference::Z_95 * rep.se_tau,
                    );
                    Ok(rep)
                }
                EstimandSpec::AteSeparate => {
                    let fit1 = fit_nawt(ds, cfg.scheme_treated_arm(), &FitOptions::default())?;
                    sandwich_ate_separate(ds, fit, &fit1, eff)
                }
                EstimandSpec::AteCombined => sandwich_ate_combined(ds, fit, eff),
                EstimandSpec::Ao => sandwich_ao(ds, fit, eff),
            }
        }
        VarianceMethod::Bootstrap => {
            let seed = cfg.seed.expect("seed checked at resolve time");
            bootstrap_se(
                ds,
                |d| Ok(point_estimate(d, cfg)?.0.tau),
                cfg.n_boot,
                seed,
                eff.tau,
            )
        }
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String> {
    let ds = load_input(cfg)?;
    let (eff, fit, gmm_objective) = point_estimate(&ds, cfg)?;
    let var = variance_for(&ds, cfg, &eff, &fit)?;
    let beta: Vec<(String, f64)> = ds
        .names
        .iter()
        .cloned()
        .zip(fit.beta.iter().copied())
        .collect();
    let report = FitReport {
        command: "fit",
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        estimand: estimand_label(cfg.estimand).to_string(),
        scheme: fit.scheme.label(),
        converged: fit.converged,
        iterations: fit.iterations,
        score_norm: fit.score_norm,
        beta,
        pi_summary: pi_summary(&fit),
        tau: eff.tau,
        se: var.se_tau,
        ci95: [var.ci95.0, var.ci95.1],
        variance_method: match var.method {
            VarianceMethod::Sandwich => "sandwich".into(),
            VarianceMethod::Bootstrap => "bootstrap".into(),
        },
        n_boot: var.n_boot,
        n_boot_failed: var.n_boot.map(|_| var.n_failed),
        gmm_objective,
        balance_table: balance_table(&ds, &fit, cfg.estimand),
    };
    render(&report, cfg.format)
}

// ---------------------------------------------------------------------------
// simulate

/// Externally reported results for matching benchmark designs (bias, rmse),
/// attached to simulation reports as annotation only.
fn benchmark_for(scenario: &str, method: &str) -> Option<(f64, f64)> {
    match (scenario, method) {
        ("a", "nawt-att-alpha2") => Some((0.045, 1.302)),
        ("a", "ipw-att") => Some((0.034, 2.269)),
        ("a", "cbps-att") => Some((0.003, 0.086)),
        ("c", "nawt-att-alpha2") => Some((-0.366, 1.637)),
        ("c", "ipw-att") => Some((-7.204, 7.415)),
        ("c", "cbps-att") => Some((-4.435, 4.558)),
        _ => None,
    }
}

#[derive(Debug, Serialize)]
struct BenchmarkRow {
    method: String,
    bias: f64,
    rmse: f64,
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    command: &'static str,
    config_hash: String,
    report: McReport,
    benchmark: Vec<BenchmarkRow>,
}

fn default_methods(cfg: &RunConfig) -> Vec<Method> {
    match cfg.estimand {
        EstimandSpec::Att | EstimandSpec::Ao | EstimandSpec::Atc => vec![
            Method::nawt_att(cfg.alpha),
            Method::ipw_att(),
            Method::cbps_att(),
        ],
        EstimandSpec::AteSeparate | EstimandSpec::AteCombined => vec![
            Method::nawt_ate_separate(cfg.alpha),
            Method::nawt_ate_combined(cfg.alpha),
            Method::ipw_ate(),
        ],
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let spec = cfg.scenario_spec()?;
    let methods = default_methods(cfg);
    let report = crate::simulation::run_monte_carlo(
        &spec,
        cfg.estimand,
        &methods,
        cfg.replicates,
        cfg.seed.expect("seed checked at resolve time"),
        cfg.parallelism,
    )?;
    let scenario_name = cfg.scenario.as_deref().unwrap_or("");
    let benchmark = (cfg.n == 1000 && cfg.estimand == EstimandSpec::Att)
        .then(|| {
            report
                .rows
                .iter()
                .filter_map(|r| {
                    benchmark_for(scenario_name, &r.method).map(|(bias, rmse)| BenchmarkRow {
                        method: r.method.clone(),
                        bias,
                        rmse,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    let wrapped = SimulateReport {
        command: "simulate",
        config_hash: cfg.config_hash.clone(),
        report,
        benchmark,
    };
    render(&wrapped, cfg.format)
}

// ---------------------------------------------------------------------------
// scan-alpha

#[derive(Debug, Serialize)]
struct ScanMcRow {
    alpha: f64,
    bias: f64,
    rmse: f64,
    coverage95: f64,
    n_failed: usize,
    chosen: bool,
}

#[derive(Debug, Serialize)]
struct ScanAdaptiveRow {
    alpha: f64,
    tau: f64,
    se: f64,
    ci95: Option<[f64; 2]>,
    error: Option<String>,
    chosen: bool,
}

#[derive(Debug, Serialize)]
struct ScanReport<T: Serialize> {
    command: &'static str,
    mode: &'static str,
    config_hash: String,
    seed: Option<u64>,
    chosen_alpha: f64,
    rows: Vec<T>,
}

pub fn cmd_scan_alpha(cfg: &RunConfig) -> Result<String> {
    if cfg.alpha_grid.is_empty() {
        return Err(NawtError::InvalidConfig("alpha grid is empty".into()));
    }
    if cfg.input.is_some() {
        // single-dataset adaptive mode: smallest sandwich variance wins
        let ds = load_input(cfg)?;
        let (scheme, rows) =
            crate::inference::adaptive_select(&ds, cfg.estimand, &cfg.alpha_grid)?;
        let chosen_alpha = match scheme {
            WeightingScheme::PowerPi(a)
            | WeightingScheme::PowerOneMinusPi(a)
            | WeightingScheme::CombinedPower(a) => a,
            _ => f64::NAN,
        };
        let mut marked = false;
        let out_rows: Vec<ScanAdaptiveRow> = rows
            .into_iter()
            .map(|r| {
                let chosen = !marked
                    && r.alpha == chosen_alpha
                    && r.report.is_some();
                if chosen {
                    marked = true;
                }
                ScanAdaptiveRow {
                    alpha: r.alpha,
                    tau: r.tau,
                    se: r.report.as_ref().map_or(f64::NAN, |v| v.se_tau),
                    ci95: r.report.as_ref().map(|v| [v.ci95.0, v.ci95.1]),
                    error: r.error,
                    chosen,
                }
            })
            .collect();
        let report = ScanReport {
            command: "scan-alpha",
            mode: "adaptive",
            config_hash: cfg.config_hash.clone(),
            seed: cfg.seed,
            chosen_alpha,
            rows: out_rows,
        };
        return render(&report, cfg.format);
    }

    // Monte Carlo mode over a scenario: the grid's methods share each
    // replicate's dataset; smallest RMSE is flagged
    let spec = cfg.scenario_spec()?;
    let methods: Vec<Method> = cfg
        .alpha_grid
        .iter()
        .map(|&a| match cfg.estimand {
            EstimandSpec::AteSeparate => Method::nawt_ate_separate(a),
            EstimandSpec::AteCombined => Method::nawt_ate_combined(a),
            EstimandSpec::Ao => Method {
                label: format!("nawt-ao-alpha{a}"),
                kind: MethodKind::Ao(WeightingScheme::PowerPi(a)),
            },
            EstimandSpec::Atc => Method {
                label: format!("nawt-atc-alpha{a}"),
                kind: MethodKind::Atc(WeightingScheme::PowerPi(a)),
            },
            EstimandSpec::Att => Method::nawt_att(a),
        })
        .collect();
    let mc = crate::simulation::run_monte_carlo(
        &spec,
        cfg.estimand,
        &methods,
        cfg.replicates,
        cfg.seed.expect("seed checked at resolve time"),
        cfg.parallelism,
    )?;
    let mut best = 0usize;
    for (i, row) in mc.rows.iter().enumerate() {
        if row.rmse < mc.rows[best].rmse {
            best = i;
        }
    }
    let rows: Vec<ScanMcRow> = mc
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ScanMcRow {
            alpha: cfg.alpha_grid[i],
            bias: r.bias,
            rmse: r.rmse,
            coverage95: r.coverage95,
            n_failed: r.n_failed,
            chosen: i == best,
        })
        .collect();
    let report = ScanReport {
        command: "scan-alpha",
        mode: "monte-carlo",
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        chosen_alpha: cfg.alpha_grid[best],
        rows,
    };
    render(&report, cfg.format)
}

// ---------------------------------------------------------------------------
// illustrate

#[derive(Debug, Serialize)]
pub struct IllustrateLevelRow {
    pub x: u32,
    pub n_units: usize,
    pub pi_np: f64,
    pub pi_mle: f64,
    pub pi_nawt: f64,
    pub weight_np: f64,
    pub weight_mle: f64,
    pub weight_nawt: f64,
}

#[derive(Debug, Serialize)]
pub struct CurveRow {
    pi_hat: f64,
    l_att_treated: f64,
    l_att_control: f64,
    l_mle_treated: f64,
    l_mle_control: f64,
    /// expected pseudo-log-likelihood at each true pi in {0.1,...,0.9}
    expected: [f64; 9],
}

#[derive(Debug, Serialize)]
struct IllustrateReport {
    command: &'static str,
    config_hash: String,
    seed: Option<u64>,
    alpha: f64,
    levels: Vec<IllustrateLevelRow>,
    curves: Vec<CurveRow>,
}

pub fn build_illustration(
    n: usize,
    seed: u64,
    alpha: f64,
) -> Result<(Vec<IllustrateLevelRow>, Vec<CurveRow>)> {
    let mut rng = RngStream::new(seed, 0).rng();
    let (ds, levels) = generate_discrete_illustration(n, &mut rng);
    let opts = FitOptions::default();
    let mle = fit_nawt(&ds, WeightingScheme::MleUnit, &opts)?;
    let nawt = fit_nawt(&ds, WeightingScheme::PowerPi(alpha), &opts)?;
    let pi_at = |beta: &DVector<f64>, x: u32| logistic_pi(beta, &[1.0, x as f64]);
    let odds = |p: f64| p / (1.0 - p);
    let level_rows = levels
        .iter()
        .map(|l| {
            let pm = pi_at(&mle.beta, l.x);
            let pn = pi_at(&nawt.beta, l.x);
            IllustrateLevelRow {
                x: l.x,
                n_units: l.n_units,
                pi_np: l.pi_np,
                pi_mle: pm,
                pi_nawt: pn,
                weight_np: odds(l.pi_np),
                weight_mle: odds(pm),
                weight_nawt: odds(pn),
            }
        })
        .collect();
    let mut curves = Vec::with_capacity(99);
    for step in 1..=99u32 {
        let p = step as f64 / 100.0;
        let l1 = treated_loglik_term(p, alpha)?;
        let l0 = control_loglik_term(p, alpha)?;
        let mut expected = [0.0; 9];
        for (j, e) in expected.iter_mut().enumerate() {
            let truth = (j + 1) as f64 / 10.0;
            *e = truth * l1 + (1.0 - truth) * l0;
        }
        curves.push(CurveRow {
            pi_hat: p,
            l_att_treated: l1,
            l_att_control: l0,
            l_mle_treated: p.ln(),
            l_mle_control: (1.0 - p).ln(),
            expected,
        });
    }
    Ok((level_rows, curves))
}

pub fn cmd_illustrate(cfg: &RunConfig) -> Result<String> {
    let n = if cfg.n == 1000 { 200_000 } else { cfg.n };
    let (levels, curves) = build_illustration(
        n,
        cfg.seed.expect("seed checked at resolve time"),
        cfg.alpha,
    )?;
    let report = IllustrateReport {
        command: "illustrate",
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        alpha: cfg.alpha,
        levels,
        curves,
    };
    render(&report, cfg.format)
}

// ---------------------------------------------------------------------------
// entry point

pub fn dispatch(cfg: &RunConfig) -> Result<String> {
    match cfg.command {
        Command::Fit => cmd_fit(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::ScanAlpha => cmd_scan_alpha(cfg),
        Command::Illustrate => cmd_illustrate(cfg),
    }
}

/// Runs the CLI; on failure prints a machine-readable error object to
/// stderr and returns the error's exit code (2 config, 3 convergence,
/// 4 I/O).
pub fn run(args: &CliArgs) -> i32 {
    let result = RunConfig::resolve(args).and_then(|cfg| {
        let content = dispatch(&cfg)?;
        emit(cfg.out.as_deref(), &content)?;
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let obj = serde_json::json!({
                "error": {
                    "code": e.code(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{obj}");
            e.exit_code()
        }
    }
}
