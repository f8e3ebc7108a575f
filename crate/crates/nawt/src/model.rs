//! Datasets, the logistic propensity model, and the weighting-function
//! family that defines each estimator variant.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NawtError, Result};

/// Probability clamp applied to every fitted probability before it enters
/// a 1/pi or 1/(1-pi) weight.
pub const PROB_CLAMP: f64 = 1e-12;

/// Weighting function omega(pi) applied to the propensity score equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightingScheme {
    /// omega = 1: the standard logistic MLE score.
    MleUnit,
    /// omega = pi^alpha, suited to ATT-type weighting.
    PowerPi(f64),
    /// omega = (1-pi)^alpha, the treated-side fit in separate ATE estimation.
    PowerOneMinusPi(f64),
    /// omega = pi^alpha + (1-pi)^alpha, the combined ATE fit.
    CombinedPower(f64),
    /// omega = 1/(1-pi): just-identified CBPS for the ATT.
    CbpsAtt,
    /// omega = 1/(pi(1-pi)): just-identified CBPS for the ATE.
    CbpsAte,
}

impl WeightingScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            WeightingScheme::PowerPi(a)
            | WeightingScheme::PowerOneMinusPi(a)
            | WeightingScheme::CombinedPower(a) => {
                if *a < 0.0 || !a.is_finite() {
                    return Err(NawtError::Domain(format!(
                        "power weighting requires alpha >= 0, got {a}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            WeightingScheme::MleUnit => "mle".into(),
            WeightingScheme::PowerPi(a) => format!("power({a})"),
            WeightingScheme::PowerOneMinusPi(a) => format!("power-rev({a})"),
            WeightingScheme::CombinedPower(a) => format!("combined({a})"),
            WeightingScheme::CbpsAtt => "cbps-att".into(),
            WeightingScheme::CbpsAte => "cbps-ate".into(),
        }
    }
}

/// The estimand a run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandSpec {
    Att,
    Atc,
    AteSeparate,
    AteCombined,
    /// Average outcome under missingness; t is read as a missingness flag.
    Ao,
}

/// omega(pi) for a given scheme. Domain error outside (0,1).
pub fn omega(scheme: WeightingScheme, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(NawtError::Domain(format!(
            "omega requires 0 < pi < 1, got {pi}"
        )));
    }
    Ok(match scheme {
        WeightingScheme::MleUnit => 1.0,
        WeightingScheme::PowerPi(a) => pi.powf(a),
        WeightingScheme::PowerOneMinusPi(a) => (1.0 - pi).powf(a),
        WeightingScheme::CombinedPower(a) => pi.powf(a) + (1.0 - pi).powf(a),
        WeightingScheme::CbpsAtt => 1.0 / (1.0 - pi),
        WeightingScheme::CbpsAte => 1.0 / (pi * (1.0 - pi)),
    })
}

/// d omega / d pi, used by the analytic score Jacobian.
pub fn omega_prime(scheme: WeightingScheme, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(NawtError::Domain(format!(
            "omega_prime requires 0 < pi < 1, got {pi}"
        )));
    }
    Ok(match scheme {
        WeightingScheme::MleUnit => 0.0,
        WeightingScheme::PowerPi(a) => {
            if a == 0.0 {
                0.0
            } else {
                a * pi.powf(a - 1.0)
            }
        }
        WeightingScheme::PowerOneMinusPi(a) => {
            if a == 0.0 {
                0.0
            } else {
                -a * (1.0 - pi).powf(a - 1.0)
            }
        }
        WeightingScheme::CombinedPower(a) => {
            if a == 0.0 {
                0.0
            } else {
                a * pi.powf(a - 1.0) - a * (1.0 - pi).powf(a - 1.0)
            }
        }
        WeightingScheme::CbpsAtt => 1.0 / ((1.0 - pi) * (1.0 - pi)),
        WeightingScheme::CbpsAte => {
            let d = pi * (1.0 - pi);
            -(1.0 - 2.0 * pi) / (d * d)
        }
    })
}

/// Numerically stable logistic probability clamped into
/// [PROB_CLAMP, 1 - PROB_CLAMP].
pub fn logistic_pi(beta: &DVector<f64>, x_row: &[f64]) -> f64 {
    let eta: f64 = beta
        .iter()
        .zip(x_row.iter())
        .map(|(b, x)| b * x)
        .sum();
    sigmoid(eta)
}

pub fn sigmoid(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// An immutable estimation sample: design matrix, binary indicator, and an
/// optional outcome. The indicator is a treatment flag in the causal case
/// and a missingness flag for average-outcome estimation, where outcomes
/// may be absent exactly on the t = 1 rows (stored as NaN).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub t: Vec<u8>,
    pub y: Option<Vec<f64>>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        t: Vec<u8>,
        y: Option<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(NawtError::Domain(format!("need n >= 2, got n = {n}")));
        }
        if t.len() != n {
            return Err(NawtError::Domain(
                "treatment vector length does not match design".into(),
            ));
        }
        if names.len() != x.ncols() {
            return Err(NawtError::Domain(
                "covariate name count does not match design".into(),
            ));
        }
        let n1 = t.iter().filter(|&&v| v == 1).count();
        if n1 == 0 {
            return Err(NawtError::EmptyClass { class: 1 });
        }
        if n1 == n {
            return Err(NawtError::EmptyClass { class: 0 });
        }
        for (i, row) in x.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(NawtError::NonFinite {
                        row: i,
                        col: names[j].clone(),
                    });
                }
            }
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(NawtError::Domain(
                    "outcome vector length does not match design".into(),
                ));
            }
            for (i, v) in y.iter().enumerate() {
                // NaN marks a missing outcome; only legal on t = 1 rows.
                if !v.is_finite() && !(v.is_nan() && t[i] == 1) {
                    return Err(NawtError::NonFinite {
                        row: i,
                        col: "outcome".into(),
                    });
                }
            }
        }
        Ok(Dataset { x, t, y, names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().cloned().collect()
    }

    /// Swaps the treatment labels; used for ATC estimation.
    pub fn relabeled(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            t: self.t.iter().map(|&v| 1 - v).collect(),
            y: self.y.clone(),
            names: self.names.clone(),
        }
    }

    /// Index of a covariate column by name.
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| NawtError::UnknownColumn(name.to_string()))
    }
}

/// Reads a dataset from CSV. The treatment column must contain only 0/1;
/// an empty outcome cell marks a missing outcome and is accepted only on
/// t = 1 rows (average-outcome semantics).
pub fn load_csv(
    path: &Path,
    treatment_col: &str,
    outcome_col: Option<&str>,
    covariate_cols: &[String],
    intercept: bool,
) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NawtError::UnknownColumn(name.to_string()))
    };
    let t_idx = find(treatment_col)?;
    let y_idx = outcome_col.map(find).transpose()?;
    let cov_idx: Vec<usize> = covariate_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let tv = record.get(t_idx).unwrap_or("").trim();
        match tv {
            "0" => t.push(0u8),
            "1" => t.push(1u8),
            other => {
                return Err(NawtError::Parse {
                    row: i + 1,
                    col: treatment_col.to_string(),
                    msg: format!("treatment must be 0 or 1, got '{other}'"),
                })
            }
        }
        if let Some(yi) = y_idx {
            let cell = record.get(yi).unwrap_or("").trim();
            if cell.is_empty() {
                y.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| NawtError::Parse {
                    row: i + 1,
                    col: outcome_col.unwrap().to_string(),
                    msg: format!("invalid number '{cell}'"),
                })?;
                y.push(v);
            }
        }
        let mut row = Vec::with_capacity(cov_idx.len() + usize::from(intercept));
        if intercept {
            row.push(1.0);
        }
        for (&ci, name) in cov_idx.iter().zip(covariate_cols.iter()) {
            let cell = record.get(ci).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| NawtError::Parse {
                row: i + 1,
                col: name.clone(),
                msg: format!("invalid number '{cell}'"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    let k = covariate_cols.len() + usize::from(intercept);
    let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let mut names = Vec::with_capacity(k);
    if intercept {
        names.push("(intercept)".to_string());
    }
    names.extend(covariate_cols.iter().cloned());
    Dataset::new(x, t, if y_idx.is_some() { Some(y) } else { None }, names)
}

/// Writes a dataset back to CSV with round-trip-exact numbers.
pub fn write_csv(ds: &Dataset, path: &Path, treatment_col: &str, outcome_col: Option<&str>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = vec![treatment_col.to_string()];
    if outcome_col.is_some() {
        header.push(outcome_col.unwrap().to_string());
    }
    header.extend(ds.names.iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.n() {
        let mut cells: Vec<String> = vec![ds.t[i].to_string()];
        if let Some(y) = &ds.y {
            cells.push(if y[i].is_nan() {
                String::new()
            } else {
                format!("{}", y[i])
            });
        }
        for j in 0..ds.k() {
            cells.push(format!("{}", ds.x[(i, j)]));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
