use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by drivers to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: u64, msg: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate_cohort: {0}")]
    DegenerateCohort(String),

    #[error("matching_failed: no case found a control within the caliper ({caliper_width:.6})")]
    MatchingFailed { caliper_width: f64 },

    #[error("propensity model did not converge after {iterations} iterations (max |coef| {max_coef:.3}, last step {last_step:.3e}); classes may be separable")]
    PropensityNonConvergence {
        iterations: usize,
        max_coef: f64,
        last_step: f64,
    },

    #[error("empty_graph: sample {0} has no in-vocabulary codes")]
    EmptyGraph(String),

    #[error("numerical_overflow in {layer}")]
    NumericalOverflow { layer: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("empty_group: cannot average an empty set of relation matrices")]
    EmptyGroup,

    #[error("undefined_auroc: scores need at least one case and one control")]
    UndefinedAuroc,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::NumericalOverflow { .. }
            | Error::Divergence { .. }
            | Error::PropensityNonConvergence { .. } => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn parse(file: &str, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.to_string(),
            line,
            msg: msg.into(),
        }
    }
}
