use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular design: {0}")]
    Singular(String),

    #[error("insufficient rows with A={arm} in training fold {fold}: have {have}, need {need}")]
    InsufficientArmData {
        arm: u8,
        fold: usize,
        have: usize,
        need: usize,
    },

    #[error("over-parameterized program: basis dimension {k} exceeds sample size {n}")]
    OverParameterized { k: usize, n: usize },

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("unstable positive-class balance: {0}")]
    UnstableBalance(String),

    #[error("strict complementarity fails for constraints {0:?}; use the bootstrap instead")]
    StrictComplementarity(Vec<usize>),

    #[error("LICQ failure: {0}")]
    Licq(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("oracle precision: two independent oracle draws differ by {gap:.3e} (> {tol:.1e}); increase the oracle sample size")]
    OraclePrecision { gap: f64, tol: f64 },

    #[error("bootstrap failure: {dropped} of {total} replicates dropped")]
    Bootstrap { dropped: usize, total: usize },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numeric/solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Serde(_) => 2,
            Error::Io { .. }
            | Error::EmptyInput(_)
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Csv(_)
            | Error::InsufficientArmData { .. }
            | Error::DegenerateGroup(_) => 3,
            Error::Domain(_)
            | Error::Singular(_)
            | Error::OverParameterized { .. }
            | Error::UnstableBalance(_)
            | Error::StrictComplementarity(_)
            | Error::Licq(_)
            | Error::Solver(_)
            | Error::OraclePrecision { .. }
            | Error::Bootstrap { .. } => 4,
        }
    }

    /// Short machine-readable tag used in error JSON artifacts.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyInput(_) => "empty_input",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Singular(_) => "singular",
            Error::InsufficientArmData { .. } => "insufficient_arm_data",
            Error::OverParameterized { .. } => "over_parameterized",
            Error::DegenerateGroup(_) => "degenerate_group",
            Error::UnstableBalance(_) => "unstable_balance",
            Error::StrictComplementarity(_) => "strict_complementarity",
            Error::Licq(_) => "licq",
            Error::Solver(_) => "solver",
            Error::OraclePrecision { .. } => "oracle_precision",
            Error::Bootstrap { .. } => "bootstrap",
            Error::Serde(_) => "serialization",
            Error::Csv(_) => "csv",
        }
    }
}
