use thiserror::Error;

/// Errors surfaced by estimation, data loading, and simulation routines.
#[derive(Debug, Error)]
pub enum NawtError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: String, msg: String },

    #[error("treatment class {class} is empty")]
    EmptyClass { class: u8 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: String },

    #[error("design matrix is rank deficient (dependent columns: {0:?})")]
    RankDeficientDesign(Vec<usize>),

    #[error("solver did not converge: score norm {score_norm:.3e} after {iterations} iterations")]
    NonConvergence { score_norm: f64, iterations: usize },

    #[error("singular Hessian (condition number {0:.3e})")]
    SingularHessian(f64),

    #[error("singular GMM weight matrix (condition number {0:.3e})")]
    SingularWeightMatrix(f64),

    #[error("zero denominator in weighted mean for {0}")]
    ZeroDenominator(String),

    #[error("too many failed replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column not found: {0}")]
    UnknownColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NawtError {
    /// Stable process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            NawtError::NonConvergence { .. }
            | NawtError::SingularHessian(_)
            | NawtError::SingularWeightMatrix(_)
            | NawtError::TooManyFailures { .. } => 3,
            NawtError::Io(_) | NawtError::Csv(_) | NawtError::Json(_) => 4,
            _ => 2,
        }
    }

    /// Short machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            NawtError::Domain(_) => "domain",
            NawtError::Parse { .. } => "parse",
            NawtError::EmptyClass { .. } => "empty_class",
            NawtError::NonFinite { .. } => "non_finite",
            NawtError::RankDeficientDesign(_) => "rank_deficient",
            NawtError::NonConvergence { .. } => "non_convergence",
            NawtError::SingularHessian(_) => "singular_hessian",
            NawtError::SingularWeightMatrix(_) => "singular_weight_matrix",
            NawtError::ZeroDenominator(_) => "zero_denominator",
            NawtError::TooManyFailures { .. } => "too_many_failures",
            NawtError::InvalidConfig(_) => "invalid_config",
            NawtError::UnknownColumn(_) => "unknown_column",
            NawtError::Io(_) => "io",
            NawtError::Csv(_) => "csv",
            NawtError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, NawtError>;
