use thiserror::Error;

pub type Result<T> = std::result::Result<T, OpeError>;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("overlap violated at state {state}, action {action}: target probability is positive but behavior probability is zero")]
    Overlap { state: usize, action: usize },

    #[error("support violated at t={t}, state {state}, action {action}: target marginal is positive but behavior marginal is zero")]
    Support { t: usize, state: usize, action: usize },

    #[error("state {state} has zero mass under the reference distribution; the density ratio is not identified")]
    ZeroMass { state: usize },

    #[error("behavior chain is reducible; communicating classes: {classes:?}")]
    Reducible { classes: Vec<Vec<usize>> },

    #[error("behavior chain is periodic with period {period}")]
    Periodic { period: usize },

    #[error("singular or ill-conditioned system (reciprocal condition {rcond:.3e}): {detail}")]
    Singular { rcond: f64, detail: String },

    #[error("infeasible fitting scheme: {0}")]
    Infeasible(String),

    #[error("zero self-normalization weight at t={t}")]
    ZeroNormalizer { t: usize },

    #[error("empty dataset")]
    EmptyData,

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("fitting failed on fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<OpeError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl OpeError {
    pub(crate) fn parse(line: usize, column: usize, message: impl Into<String>) -> Self {
        OpeError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    /// True for errors that signal a non-identified estimand (zero-mass
    /// denominators, overlap or support failures, reducible chains).
    pub fn is_identifiability(&self) -> bool {
        match self {
            OpeError::Overlap { .. }
            | OpeError::Support { .. }
            | OpeError::ZeroMass { .. }
            | OpeError::Reducible { .. }
            | OpeError::Periodic { .. } => true,
            OpeError::Fold { source, .. } => source.is_identifiability(),
            _ => false,
        }
    }
}
